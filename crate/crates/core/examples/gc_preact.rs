use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waspnet_core::conv::conv2d_t;
use waspnet_core::graph::{build_head, AsppConfig, Fusion, HeadConfig};
use waspnet_core::tensor::{Shape, Tensor};

fn main() {
    for seed in 1u64..=5 {
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
        for branch in 1..=2 {
            let id = g.find_node(&format!("aspp.b{branch}.conv")).unwrap();
            let ps = g.param_tensors(id);
            let r = if branch == 1 { 2 } else { 4 };
            let y = conv2d_t(&x, &ps[0], Some(ps[1].data()), (1, 1), (r, r), (r, r)).unwrap();
            let min_abs = y.data().iter().map(|v| v.abs()).fold(f32::INFINITY, f32::min);
            let n_zero = y.data().iter().filter(|v| **v == 0.0).count();
            println!("seed {seed} b{branch}: min|preact| {min_abs:.3e}, exact zeros {n_zero}");
        }
    }
}
