use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waspnet_core::gradcheck::{check_graph_gradients, GradCheckConfig};
use waspnet_core::graph::{GraphBuilder, LayerKind, ModuleGraph};
use waspnet_core::tensor::{Shape, Tensor};

fn conv(in_ch: usize, out_ch: usize, rate: usize, bias: bool) -> LayerKind {
    LayerKind::Conv {
        out_ch,
        in_ch,
        kh: 3,
        kw: 3,
        stride: (1, 1),
        rate: (rate, rate),
        padding: (rate, rate),
        bias,
    }
}

fn check(name: &str, mut g: ModuleGraph, in_ch: usize) {
    g.init_parameters(3);
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let shape = Shape::new(1, in_ch, 10, 10);
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(shape, data).unwrap();
    match check_graph_gradients(
        &mut g,
        &x,
        &GradCheckConfig {
            max_coords_per_tensor: 48,
            seed: 3,
            ..GradCheckConfig::default()
        },
    ) {
        Ok(r) => println!(
            "{name:<28} max_rel {:.3e} checked {} nonsmooth {}",
            r.max_rel_err, r.coords_checked, r.coords_nonsmooth
        ),
        Err(e) => println!("{name:<28} ERR {e}"),
    }
}

fn main() {
    // conv alone
    let mut b = GraphBuilder::new("a");
    let i = b.input("input", 8);
    let c = b.add("conv", conv(8, 4, 2, true), &[i]).unwrap();
    check("conv(r2)", b.finish(c).unwrap(), 8);

    // conv + relu
    let mut b = GraphBuilder::new("b");
    let i = b.input("input", 8);
    let c = b.add("conv", conv(8, 4, 2, true), &[i]).unwrap();
    let r = b.add("relu", LayerKind::Relu, &[c]).unwrap();
    check("conv(r2)+relu", b.finish(r).unwrap(), 8);

    // conv + relu + proj
    let mut b = GraphBuilder::new("c");
    let i = b.input("input", 8);
    let c = b.add("conv", conv(8, 4, 2, true), &[i]).unwrap();
    let r = b.add("relu", LayerKind::Relu, &[c]).unwrap();
    let p = b
        .add(
            "proj",
            LayerKind::Conv {
                out_ch: 4,
                in_ch: 4,
                kh: 1,
                kw: 1,
                stride: (1, 1),
                rate: (1, 1),
                padding: (0, 0),
                bias: true,
            },
            &[r],
        )
        .unwrap();
    check("conv(r2)+relu+proj", b.finish(p).unwrap(), 8);

    // rate 4 variant
    let mut b = GraphBuilder::new("d");
    let i = b.input("input", 8);
    let c = b.add("conv", conv(8, 4, 4, true), &[i]).unwrap();
    let r = b.add("relu", LayerKind::Relu, &[c]).unwrap();
    check("conv(r4)+relu", b.finish(r).unwrap(), 8);
}
