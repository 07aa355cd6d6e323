use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waspnet_core::conv::{conv2d_backward_t, conv2d_t};
use waspnet_core::graph::{GraphBuilder, LayerKind};
use waspnet_core::ops;
use waspnet_core::tensor::{Shape, Tensor};

fn main() {
    let mut b = GraphBuilder::new("b");
    let i = b.input("input", 8);
    let c = b
        .add(
            "conv",
            LayerKind::Conv {
                out_ch: 4,
                in_ch: 8,
                kh: 3,
                kw: 3,
                stride: (1, 1),
                rate: (2, 2),
                padding: (2, 2),
                bias: true,
            },
            &[i],
        )
        .unwrap();
    let r = b.add("relu", LayerKind::Relu, &[c]).unwrap();
    let mut g = b.finish(r).unwrap();
    g.init_parameters(3);

    let mut rng = ChaCha8Rng::seed_from_u64(93);
    let shape = Shape::new(1, 8, 10, 10);
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(shape, data).unwrap();

    // same projection the checker builds (seed ^ 0xABCD)
    let mut prng = ChaCha8Rng::seed_from_u64(3 ^ 0xABCD);
    let mut train_rng = ChaCha8Rng::seed_from_u64(0);
    let (out, trace) = g.forward_train(&[&x], &mut train_rng).unwrap();
    let proj = {
        let data = (0..out.len())
            .map(|_| if prng.gen::<bool>() { 1.0f32 } else { -1.0 })
            .collect();
        Tensor::from_vec(out.shape(), data).unwrap()
    };
    g.zero_grads();
    let input_grads = g.backward(&trace, &proj).unwrap();

    // manual composition with the same primitives
    let conv_id = g.find_node("conv").unwrap();
    let k = g.param_tensors(conv_id)[0].clone();
    let bias = g.param_tensors(conv_id)[1].clone();
    let conv_out = conv2d_t(&x, &k, Some(bias.data()), (1, 1), (2, 2), (2, 2)).unwrap();
    let y = ops::relu_t(&conv_out);
    let manual_out = y.clone();
    assert_eq!(manual_out, out, "forward mismatch");
    let grelu = ops::relu_backward_t(&conv_out, &proj);
    let (gx, gk, gb) = conv2d_backward_t(&x, &k, true, (1, 1), (2, 2), (2, 2), &grelu).unwrap();

    let graph_gk = &g.grad_tensors(conv_id)[0];
    let graph_gb = &g.grad_tensors(conv_id)[1];
    println!("gk diff: {}", gk.max_abs_diff(graph_gk).unwrap());
    println!("gb diff: {}", gb.unwrap().max_abs_diff(graph_gb).unwrap());
    println!("gx diff: {}", gx.max_abs_diff(&input_grads[0]).unwrap());

    // now FD one coordinate of the kernel that the checker flags
    let k64 = k.cast::<f64>();
    let x64 = x.cast::<f64>();
    let b64 = bias.cast::<f64>();
    let p64 = proj.cast::<f64>();
    let loss = |k: &waspnet_core::TensorBase<f64>| -> f64 {
        let co = conv2d_t(&x64, k, Some(b64.data()), (1, 1), (2, 2), (2, 2)).unwrap();
        let y = ops::relu_t(&co);
        y.data().iter().zip(p64.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for ci in 0..k.len() {
        let mut kp = k64.clone();
        kp.data_mut()[ci] += 1e-3;
        let plus = loss(&kp);
        kp.data_mut()[ci] -= 2e-3;
        let minus = loss(&kp);
        let fd = (plus - minus) / 2e-3;
        let a = gk.data()[ci] as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        if rel > worst.1 {
            worst = (ci, rel, a, fd);
        }
    }
    println!(
        "worst kernel coord {}: rel {:.3e} analytic {:.6} fd {:.6}",
        worst.0, worst.1, worst.2, worst.3
    );

    // count conv outputs exactly at zero or tiny
    let tiny = conv_out
        .data()
        .iter()
        .filter(|v| v.abs() < 1e-3)
        .count();
    let zero = conv_out.data().iter().filter(|v| **v == 0.0).count();
    println!("conv outputs: {} tiny (<1e-3), {} exactly zero of {}", tiny, zero, conv_out.len());
    let min_abs = conv_out.data().iter().map(|v| v.abs()).fold(f32::INFINITY, f32::min);
    println!("min |preact| = {min_abs:.3e}");

    // Richardson ladder at the worst coordinate
    let ci = worst.0;
    for eps in [1e-3f64, 5e-4, 2.5e-4, 1e-5] {
        let mut kp = k64.clone();
        kp.data_mut()[ci] += eps;
        let plus = loss(&kp);
        kp.data_mut()[ci] -= 2.0 * eps;
        let minus = loss(&kp);
        println!("fd(eps={eps:.1e}) = {:.6}", (plus - minus) / (2.0 * eps));
    }
}
