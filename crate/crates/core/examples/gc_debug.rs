use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waspnet_core::gradcheck::{grad_check, GradCheckConfig};
use waspnet_core::graph::{build_head, AsppConfig, Fusion, HeadConfig};
use waspnet_core::tensor::{Shape, Tensor, TensorBase};

fn main() {
    let seed = 3u64;
    let cfg = HeadConfig::Aspp(AsppConfig {
        in_ch: 8,
        branch_ch: 4,
        out_ch: 4,
        rates: vec![2, 4],
        fusion: Fusion::Sum,
    });
    let mut g = build_head(&cfg).unwrap();
    g.init_parameters(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 90);
    let shape = Shape::new(1, 8, 10, 10);
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(shape, data).unwrap();

    // replicate check_graph_gradients but per tensor
    let mut train_rng = ChaCha8Rng::seed_from_u64(0);
    let (out, trace) = g.forward_train(&[&x], &mut train_rng).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let proj = {
        let data = (0..out.len())
            .map(|_| if prng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Tensor::from_vec(out.shape(), data).unwrap()
    };
    g.zero_grads();
    let input_grads = g.backward(&trace, &proj).unwrap();

    let mut at: Vec<TensorBase<f64>> = Vec::new();
    let mut analytic: Vec<TensorBase<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut layout = Vec::new();
    for id in 0..g.nodes().len() {
        let ps = g.param_tensors(id);
        layout.push(ps.len());
        for (i, (p, gr)) in ps.iter().zip(g.grad_tensors(id)).enumerate() {
            at.push(p.cast());
            analytic.push(gr.cast());
            names.push(format!("{}[{}]", g.node(id).name, i));
        }
    }
    at.push(x.cast());
    analytic.push(input_grads[0].cast());
    names.push("input".into());

    let buffers64 = g.buffers_cast::<f64>();
    let proj64: TensorBase<f64> = proj.cast();
    for ti in 0..at.len() {
        let g2 = &g;
        let layout2 = layout.clone();
        let b2 = buffers64.clone();
        let p2 = proj64.clone();
        let at2 = at.clone();
        let f = move |inputs: &[TensorBase<f64>]| -> waspnet_core::Result<f64> {
            // inputs: single tensor ti; rebuild full list
            let mut full = at2.clone();
            full[ti] = inputs[0].clone();
            let mut params: Vec<Vec<TensorBase<f64>>> = Vec::new();
            let mut cursor = 0;
            for count in &layout2 {
                params.push(full[cursor..cursor + count].to_vec());
                cursor += count;
            }
            let x64 = &full[cursor];
            let y = g2.forward_shadow(&params, &b2, &[x64])?;
            Ok(y.data().iter().zip(p2.data()).map(|(a, b)| a * b).sum())
        };
        let report = grad_check(
            f,
            &[at[ti].clone()],
            &[analytic[ti].clone()],
            &GradCheckConfig {
                max_coords_per_tensor: 64,
                seed,
                ..GradCheckConfig::default()
            },
        );
        match report {
            Ok(r) => println!(
                "{:<22} max_rel {:.3e} checked {} nonsmooth {}",
                names[ti], r.max_rel_err, r.coords_checked, r.coords_nonsmooth
            ),
            Err(e) => println!("{:<22} ERR {e}", names[ti]),
        }
    }
}
