use super::*;
use crate::archcfg::{parse_network_config, serialize_network_config};
use crate::conv::{conv2d_t, ConvSpec};
use crate::gradcheck::{check_graph_gradients, GradCheckConfig};
use crate::ops;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_input(seed: u64, shape: Shape) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn conv_spec_of(graph: &ModuleGraph, name: &str) -> ConvSpec {
    let id = graph.find_node(name).unwrap_or_else(|| panic!("no node {name}"));
    let LayerKind::Conv {
        stride,
        rate,
        padding,
        bias,
        ..
    } = graph.node(id).kind
    else {
        panic!("{name} is not a conv");
    };
    let params = graph.param_tensors(id);
    ConvSpec {
        kernel: params[0].clone(),
        bias: bias.then(|| params[1].data().to_vec()),
        stride,
        rate,
        padding,
    }
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

#[test]
fn single_conv_parameter_count_is_closed_form() {
    let mut b = GraphBuilder::new("t");
    let input = b.input("input", 4);
    b.add(
        "conv",
        LayerKind::Conv {
            out_ch: 8,
            in_ch: 4,
            kh: 3,
            kw: 3,
            stride: (1, 1),
            rate: (1, 1),
            padding: (1, 1),
            bias: true,
        },
        &[input],
    )
    .unwrap();
    let g = b.finish(1).unwrap();
    assert_eq!(g.count_parameters(), 8 * 4 * 3 * 3 + 8);
}

#[test]
fn resnet101_trunk_counts_42_5_million() {
    let g = build_backbone(&BackboneKind::Resnet101Counting).unwrap();
    // layer-by-layer closed form for the standard bottleneck trunk
    let conv = |ic: usize, oc: usize, k: usize| oc * ic * k * k;
    let bn = |c: usize| 2 * c;
    let block = |inp: usize, planes: usize, down: bool| {
        let mut p = conv(inp, planes, 1)
            + bn(planes)
            + conv(planes, planes, 3)
            + bn(planes)
            + conv(planes, planes * 4, 1)
            + bn(planes * 4);
        if down {
            p += conv(inp, planes * 4, 1) + bn(planes * 4);
        }
        p
    };
    let mut want = conv(3, 64, 7) + bn(64);
    let mut inp = 64;
    for (planes, blocks) in [(64usize, 3usize), (128, 4), (256, 23), (512, 3)] {
        want += block(inp, planes, true);
        inp = planes * 4;
        want += block(inp, planes, false) * (blocks - 1);
    }
    assert_eq!(want, 42_500_160);
    assert_eq!(g.count_parameters(), 42_500_160);
}

#[test]
fn toy_resnet_count_matches_closed_form() {
    let g = build_backbone(&BackboneKind::ToyResnet { depth: 2, width: 16 }).unwrap();
    let conv = |ic: usize, oc: usize| oc * ic * 9;
    let bn = |c: usize| 2 * c;
    let want = conv(3, 16)
        + bn(16)
        + conv(16, 16)
        + bn(16)
        + conv(16, 32)
        + bn(32)
        + 2 * (2 * conv(32, 32) + 2 * bn(32));
    assert_eq!(g.count_parameters(), want);
}

#[test]
fn reference_network_counts_and_ordering() {
    let count = |head: &str| {
        build_network(&NetworkConfig::reference(head).unwrap())
            .unwrap()
            .count_parameters()
    };
    let aspp = count("aspp");
    let wasp = count("wasp");
    let res2net = count("res2net-seg");
    assert_eq!(aspp, 62_378_965);
    assert_eq!(wasp, 49_672_373);
    assert_eq!(res2net, 53_470_165);
    assert!(wasp < res2net && res2net < aspp);
}

#[test]
fn count_survives_config_round_trip() {
    for head in ["aspp", "cascade", "res2net-seg", "wasp"] {
        let cfg = NetworkConfig::reference(head).unwrap();
        let g1 = build_network(&cfg).unwrap();
        let reparsed = parse_network_config(&serialize_network_config(&cfg)).unwrap();
        let g2 = build_network(&reparsed).unwrap();
        assert_eq!(g1.count_parameters(), g2.count_parameters());
    }
}

// ---------------------------------------------------------------------------
// forward semantics
// ---------------------------------------------------------------------------

#[test]
fn identity_only_graph_returns_its_input() {
    let mut b = GraphBuilder::new("id");
    let input = b.input("input", 3);
    let s = b
        .add("slice", LayerKind::Split { index: 0, parts: 1 }, &[input])
        .unwrap();
    let mut g = b.finish(s).unwrap();
    g.init_parameters(0);
    let x = random_input(5, Shape::new(2, 3, 4, 4));
    assert_eq!(g.forward(&[&x]).unwrap(), x);
}

#[test]
fn two_layer_pointwise_graph_is_the_composed_matrix_action() {
    let mut b = GraphBuilder::new("lin");
    let input = b.input("input", 3);
    let c1 = b
        .add(
            "a",
            LayerKind::Conv {
                out_ch: 2,
                in_ch: 3,
                kh: 1,
                kw: 1,
                stride: (1, 1),
                rate: (1, 1),
                padding: (0, 0),
                bias: true,
            },
            &[input],
        )
        .unwrap();
    let c2 = b
        .add(
            "b",
            LayerKind::Conv {
                out_ch: 4,
                in_ch: 2,
                kh: 1,
                kw: 1,
                stride: (1, 1),
                rate: (1, 1),
                padding: (0, 0),
                bias: true,
            },
            &[c1],
        )
        .unwrap();
    let mut g = b.finish(c2).unwrap();
    g.init_parameters(3);
    let x = random_input(7, Shape::new(1, 3, 2, 2));
    let y = g.forward(&[&x]).unwrap();

    let a_w = graph_param(&g, "a", 0);
    let a_b = graph_param(&g, "a", 1);
    let b_w = graph_param(&g, "b", 0);
    let b_b = graph_param(&g, "b", 1);
    for yy in 0..2 {
        for xx in 0..2 {
            // hidden = A x + a
            let mut hidden = [0.0f64; 2];
            for (o, h) in hidden.iter_mut().enumerate() {
                let mut acc = a_b.data()[o] as f64;
                for i in 0..3 {
                    acc += a_w.at(o, i, 0, 0) as f64 * x.at(0, i, yy, xx) as f64;
                }
                *h = acc;
            }
            for o in 0..4 {
                let mut acc = b_b.data()[o] as f64;
                for (i, h) in hidden.iter().enumerate() {
                    acc += b_w.at(o, i, 0, 0) as f64 * h;
                }
                let got = y.at(0, o, yy, xx) as f64;
                assert!((got - acc).abs() < 1e-5, "({yy},{xx},{o}): {got} vs {acc}");
            }
        }
    }
}

fn graph_param<'g>(g: &'g ModuleGraph, node: &str, idx: usize) -> &'g Tensor {
    &g.param_tensors(g.find_node(node).unwrap())[idx]
}

#[test]
fn aspp_two_branch_forward_matches_manual_composition() {
    let cfg = AsppConfig {
        in_ch: 8,
        branch_ch: 4,
        out_ch: 4,
        rates: vec![2, 4],
        fusion: Fusion::Sum,
    };
    let mut g = build_aspp(&cfg).unwrap();
    g.init_parameters(17);
    let x = random_input(23, Shape::new(1, 8, 6, 6));
    let got = g.forward(&[&x]).unwrap();

    let mut acc: Option<Tensor> = None;
    for i in 1..=2 {
        let conv = conv_spec_of(&g, &format!("aspp.b{i}.conv"));
        let proj = conv_spec_of(&g, &format!("aspp.b{i}.proj"));
        let branch = crate::conv::conv2d(&ops::relu(&crate::conv::conv2d(&x, &conv).unwrap()), &proj).unwrap();
        acc = Some(match acc {
            None => branch,
            Some(a) => a.add_scaled(&branch, 1.0).unwrap(),
        });
    }
    let want = acc.unwrap();
    assert_eq!(got.shape(), want.shape());
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
}

#[test]
fn wasp_single_rate_reduces_to_a_chain() {
    let cfg = WaspConfig {
        in_ch: 4,
        branch_ch: 3,
        out_ch: 2,
        rates: vec![1],
        gap_branch: false,
    };
    let mut g = build_wasp(&cfg).unwrap();
    g.init_parameters(29);
    let x = random_input(31, Shape::new(1, 4, 5, 5));
    let got = g.forward(&[&x]).unwrap();

    let conv = conv_spec_of(&g, "wasp.b1.conv");
    let tap = conv_spec_of(&g, "wasp.b1.tap");
    let fuse = conv_spec_of(&g, "wasp.fuse");
    let want = crate::conv::conv2d(
        &crate::conv::conv2d(&ops::relu(&crate::conv::conv2d(&x, &conv).unwrap()), &tap).unwrap(),
        &fuse,
    )
    .unwrap();
    assert_eq!(got, want);
}

#[test]
fn res2net_two_scale_forward_matches_hand_wiring() {
    let cfg = Res2netSegConfig {
        in_ch: 4,
        scales: 2,
        rates: vec![3],
        se_reduction: 4,
        out_ch: 3,
    };
    let mut g = build_res2net_seg(&cfg).unwrap();
    g.init_parameters(41);
    let x = random_input(43, Shape::new(1, 4, 5, 5));
    let got = g.forward(&[&x]).unwrap();

    // split into two channel groups
    let mut x1 = Tensor::zeros(Shape::new(1, 2, 5, 5));
    let mut x2 = Tensor::zeros(Shape::new(1, 2, 5, 5));
    for c in 0..2 {
        for y in 0..5 {
            for xx in 0..5 {
                x1.set(0, c, y, xx, x.at(0, c, y, xx));
                x2.set(0, c, y, xx, x.at(0, c + 2, y, xx));
            }
        }
    }
    let conv = conv_spec_of(&g, "res2net-seg.scale2.conv");
    let y2 = ops::relu(&crate::conv::conv2d(&x1.add_scaled(&x2, 1.0).unwrap(), &conv).unwrap());
    // pooled input broadcast back
    let pooled = ops::global_avg_pool(&x).unwrap();
    let broad = ops::bilinear_resize(&pooled, 5, 5).unwrap();
    // concat [x1, y2, broad] = 8 channels
    let mut cat = Tensor::zeros(Shape::new(1, 8, 5, 5));
    for y in 0..5 {
        for xx in 0..5 {
            for c in 0..2 {
                cat.set(0, c, y, xx, x1.at(0, c, y, xx));
                cat.set(0, 2 + c, y, xx, y2.at(0, c, y, xx));
            }
            for c in 0..4 {
                cat.set(0, 4 + c, y, xx, broad.at(0, c, y, xx));
            }
        }
    }
    // squeeze-excitation gate
    let se_id = g.find_node("res2net-seg.se").unwrap();
    let se = g.param_tensors(se_id);
    let s = ops::global_avg_pool(&cat).unwrap();
    let h = ops::relu_t(&conv2d_t(&s, &se[0], Some(se[1].data()), (1, 1), (1, 1), (0, 0)).unwrap());
    let gate = ops::sigmoid_t(&conv2d_t(&h, &se[2], Some(se[3].data()), (1, 1), (1, 1), (0, 0)).unwrap());
    let mut gated = cat.clone();
    for c in 0..8 {
        let gv = gate.at(0, c, 0, 0);
        for y in 0..5 {
            for xx in 0..5 {
                let v = gated.at(0, c, y, xx) * gv;
                gated.set(0, c, y, xx, v);
            }
        }
    }
    let proj = conv_spec_of(&g, "res2net-seg.proj");
    let want = crate::conv::conv2d(&gated, &proj).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
}

#[test]
fn se_gate_with_zero_weights_halves_the_map() {
    let mut b = GraphBuilder::new("se");
    let input = b.input("input", 4);
    let gate = b
        .add(
            "gate",
            LayerKind::SeGate {
                channels: 4,
                reduction: 2,
            },
            &[input],
        )
        .unwrap();
    let mut g = b.finish(gate).unwrap();
    g.init_parameters(0);
    // zero out the gating weights: sigmoid(0) = 0.5
    for (name, shape) in [
        ("gate.w1", Shape::new(2, 4, 1, 1)),
        ("gate.w2", Shape::new(4, 2, 1, 1)),
    ] {
        g.set_parameter(name, Tensor::zeros(shape)).unwrap();
    }
    let x = random_input(13, Shape::new(2, 4, 3, 3));
    let y = g.forward(&[&x]).unwrap();
    let want = x.scaled(0.5);
    assert!(y.max_abs_diff(&want).unwrap() <= 1e-7);
}

#[test]
fn zero_weight_single_class_decoder_emits_zero_logits() {
    let cfg = DecoderConfig {
        score_ch: 4,
        lowlevel_ch: 3,
        num_classes: 1,
        conv_ch: 4,
        dropout: 0.5,
    };
    let mut g = build_decoder(&cfg).unwrap();
    g.init_parameters(1);
    for id in 0..g.nodes().len() {
        let shapes = g.node(id).kind.param_shapes();
        let name = g.node(id).name.clone();
        for (suffix, shape) in shapes {
            g.set_parameter(&format!("{name}.{suffix}"), Tensor::zeros(shape))
                .unwrap();
        }
    }
    let score = random_input(3, Shape::new(1, 4, 8, 8));
    let lowlevel = random_input(4, Shape::new(1, 3, 16, 16));
    let y = g.forward(&[&score, &lowlevel]).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 64, 64));
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let cfg = NetworkConfig::toy("res2net-seg", 4).unwrap();
    let mut g = build_network(&cfg).unwrap();
    g.init_parameters(5);
    let x = random_input(6, Shape::new(2, 3, 32, 32));
    let a = g.forward(&[&x]).unwrap();
    let b = g.forward(&[&x]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_reports_layer_name_on_shape_mismatch() {
    let cfg = DecoderConfig {
        score_ch: 4,
        lowlevel_ch: 3,
        num_classes: 2,
        conv_ch: 4,
        dropout: 0.1,
    };
    let mut g = build_decoder(&cfg).unwrap();
    g.init_parameters(1);
    let score = Tensor::zeros(Shape::new(1, 4, 8, 8));
    let lowlevel = Tensor::zeros(Shape::new(1, 3, 15, 15)); // not 2x the score dims
    let err = g.forward(&[&score, &lowlevel]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("decoder.concat"), "{msg}");
}

#[test]
fn uninitialized_parameters_are_an_error() {
    let g = build_aspp(&AsppConfig {
        in_ch: 4,
        branch_ch: 2,
        out_ch: 2,
        rates: vec![1],
        fusion: Fusion::Sum,
    })
    .unwrap();
    let x = Tensor::zeros(Shape::new(1, 4, 4, 4));
    assert!(g.forward(&[&x]).is_err());
}

// ---------------------------------------------------------------------------
// shape chains
// ---------------------------------------------------------------------------

#[test]
fn heads_preserve_spatial_dimensions() {
    let probes = [Shape::new(1, 32, 9, 13), Shape::new(2, 32, 16, 16)];
    for head in ["aspp", "cascade", "res2net-seg", "wasp"] {
        let cfg = NetworkConfig::toy(head, 4).unwrap();
        let g = build_head(&cfg.head).unwrap();
        for probe in probes {
            let out = g.output_shape(&[probe]).unwrap();
            assert_eq!((out.h, out.w), (probe.h, probe.w), "head {head} probe {probe}");
        }
    }
}

#[test]
fn full_hd_input_flows_through_the_documented_resolutions() {
    let cfg = NetworkConfig::reference("wasp").unwrap();
    let g = build_network(&cfg).unwrap();
    let shapes = g.infer_shapes(&[Shape::new(1, 3, 1080, 1920)]).unwrap();
    let at = |name: &str| shapes[g.find_node(name).unwrap()];

    // backbone feature maps at stride 8, low-level tap at stride 4
    let feat = at("backbone.layer4.b3.relu3");
    assert_eq!((feat.c, feat.h, feat.w), (2048, 135, 240));
    let tap = at("backbone.layer1.b3.relu3");
    assert_eq!((tap.c, tap.h, tap.w), (256, 270, 480));
    // head emits 256 score maps at the same resolution
    let score = at("wasp.fuse");
    assert_eq!((score.c, score.h, score.w), (256, 135, 240));
    // decoder concatenates 512 channels at stride 4 and restores input size
    let cat = at("decoder.concat");
    assert_eq!((cat.c, cat.h, cat.w), (512, 270, 480));
    let out = shapes[g.output_node()];
    assert_eq!((out.c, out.h, out.w), (21, 1080, 1920));
}

#[test]
fn toy_network_shape_chain_on_64px_input() {
    let cfg = NetworkConfig::toy("wasp", 4).unwrap();
    let g = build_network(&cfg).unwrap();
    let shapes = g.infer_shapes(&[Shape::new(1, 3, 64, 64)]).unwrap();
    let at = |name: &str| shapes[g.find_node(name).unwrap()];
    assert_eq!(at("wasp.fuse").h, 8); // stride 8 score maps
    assert_eq!(at("decoder.concat").h, 16); // x2 to the stride-4 tap
    let out = shapes[g.output_node()];
    assert_eq!((out.h, out.w), (64, 64));
}

#[test]
fn backbones_have_output_stride_8() {
    for kind in [
        BackboneKind::ToyResnet { depth: 2, width: 16 },
        BackboneKind::Resnet101Counting,
    ] {
        let g = build_backbone(&kind).unwrap();
        let out = g.output_shape(&[Shape::new(1, 3, 64, 64)]).unwrap();
        assert_eq!((out.h, out.w), (8, 8), "{kind:?}");
        assert_eq!(out.c, kind.out_channels());
    }
}

// ---------------------------------------------------------------------------
// impulse responses
// ---------------------------------------------------------------------------

/// Offsets reachable by a 3x3 kernel at the given rate.
fn kernel_offsets(rate: isize) -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for dy in [-rate, 0, rate] {
        for dx in [-rate, 0, rate] {
            v.push((dy, dx));
        }
    }
    v
}

fn sumset(a: &[(isize, isize)], b: &[(isize, isize)]) -> std::collections::BTreeSet<(isize, isize)> {
    let mut out = std::collections::BTreeSet::new();
    for x in a {
        for y in b {
            out.insert((x.0 + y.0, x.1 + y.1));
        }
    }
    out
}

#[test]
fn cascade_impulse_support_is_the_composed_footprint() {
    let cfg = CascadeConfig {
        in_ch: 1,
        branch_ch: 1,
        out_ch: 1,
        rates: vec![2, 4],
    };
    let mut g = build_cascade(&cfg).unwrap();
    g.init_parameters(0);
    // all-ones kernels, zero bias: relu is transparent for a positive impulse
    for name in ["cascade.s1.conv", "cascade.s2.conv", "cascade.proj"] {
        let id = g.find_node(name).unwrap();
        let shapes = g.node(id).kind.param_shapes();
        g.set_parameter(&format!("{name}.weight"), Tensor::filled(shapes[0].1, 1.0))
            .unwrap();
        g.set_parameter(&format!("{name}.bias"), Tensor::zeros(shapes[1].1))
            .unwrap();
    }
    let size = 25usize;
    let center = (size / 2) as isize;
    let mut x = Tensor::zeros(Shape::new(1, 1, size, size));
    x.set(0, 0, center as usize, center as usize, 1.0);
    let y = g.forward(&[&x]).unwrap();

    let want = sumset(&kernel_offsets(2), &kernel_offsets(4));
    let mut got = std::collections::BTreeSet::new();
    for yy in 0..size {
        for xx in 0..size {
            if y.at(0, 0, yy, xx) != 0.0 {
                got.insert((yy as isize - center, xx as isize - center));
            }
        }
    }
    assert_eq!(got, want);
}

#[test]
fn wasp_deepest_branch_support_composes_both_rates() {
    let cfg = WaspConfig {
        in_ch: 1,
        branch_ch: 1,
        out_ch: 1,
        rates: vec![2, 4],
        gap_branch: false,
    };
    let mut g = build_wasp(&cfg).unwrap();
    g.init_parameters(0);
    let ones = |g: &mut ModuleGraph, name: &str| {
        let id = g.find_node(name).unwrap();
        let shapes = g.node(id).kind.param_shapes();
        g.set_parameter(&format!("{name}.weight"), Tensor::filled(shapes[0].1, 1.0))
            .unwrap();
        g.set_parameter(&format!("{name}.bias"), Tensor::zeros(shapes[1].1))
            .unwrap();
    };
    ones(&mut g, "wasp.b1.conv");
    ones(&mut g, "wasp.b2.conv");
    ones(&mut g, "wasp.b2.tap");
    // silence the shallow tap; route only the deepest tap through the fusion
    let b1tap = g.find_node("wasp.b1.tap").unwrap();
    let shapes = g.node(b1tap).kind.param_shapes();
    g.set_parameter("wasp.b1.tap.weight", Tensor::zeros(shapes[0].1)).unwrap();
    g.set_parameter("wasp.b1.tap.bias", Tensor::zeros(shapes[1].1)).unwrap();
    let fuse =
        Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0, 1.0]).unwrap();
    g.set_parameter("wasp.fuse.weight", fuse).unwrap();
    g.set_parameter("wasp.fuse.bias", Tensor::zeros(Shape::new(1, 1, 1, 1))).unwrap();

    let size = 25usize;
    let center = (size / 2) as isize;
    let mut x = Tensor::zeros(Shape::new(1, 1, size, size));
    x.set(0, 0, center as usize, center as usize, 1.0);
    let y = g.forward(&[&x]).unwrap();

    let want = sumset(&kernel_offsets(2), &kernel_offsets(4));
    let mut got = std::collections::BTreeSet::new();
    for yy in 0..size {
        for xx in 0..size {
            if y.at(0, 0, yy, xx) != 0.0 {
                got.insert((yy as isize - center, xx as isize - center));
            }
        }
    }
    assert_eq!(got, want);
}

#[test]
fn impulse_support_fits_inside_the_computed_receptive_field() {
    // heads without global branches; support may be smaller (relu) but
    // never larger than the analysis
    let heads: Vec<(&str, ModuleGraph)> = vec![
        (
            "aspp",
            build_aspp(&AsppConfig {
                in_ch: 2,
                branch_ch: 2,
                out_ch: 2,
                rates: vec![2, 4],
                fusion: Fusion::Sum,
            })
            .unwrap(),
        ),
        (
            "cascade",
            build_cascade(&CascadeConfig {
                in_ch: 2,
                branch_ch: 2,
                out_ch: 2,
                rates: vec![2, 4],
            })
            .unwrap(),
        ),
        (
            "wasp",
            build_wasp(&WaspConfig {
                in_ch: 2,
                branch_ch: 2,
                out_ch: 2,
                rates: vec![2, 4],
                gap_branch: false,
            })
            .unwrap(),
        ),
    ];
    for (name, mut g) in heads {
        g.init_parameters(9);
        let rf = receptive_field(&g).unwrap()[g.output_node()];
        assert!(!rf.global_context);
        let radius = ((rf.receptive_field - 1) / 2) as isize;
        let size = 31usize;
        let center = (size / 2) as isize;
        let mut x = Tensor::zeros(Shape::new(1, 2, size, size));
        x.set(0, 0, center as usize, center as usize, 1.0);
        x.set(0, 1, center as usize, center as usize, -0.5);
        let y = g.forward(&[&x]).unwrap();
        // bias makes the response nonzero everywhere; subtract the
        // zero-input response
        let bias_only = g.forward(&[&Tensor::zeros(x.shape())]).unwrap();
        let s = y.shape();
        for c in 0..s.c {
            for yy in 0..s.h {
                for xx in 0..s.w {
                    let v = y.at(0, c, yy, xx) - bias_only.at(0, c, yy, xx);
                    if v.abs() > 1e-6 {
                        let dy = (yy as isize - center).abs();
                        let dx = (xx as isize - center).abs();
                        assert!(
                            dy <= radius && dx <= radius,
                            "{name}: response at ({dy},{dx}) beyond radius {radius}"
                        );
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// gradients through assembled graphs
// ---------------------------------------------------------------------------

#[test]
fn toy_wasp_head_passes_the_end_to_end_gradient_check() {
    let cfg = WaspConfig {
        in_ch: 4,
        branch_ch: 3,
        out_ch: 4,
        rates: vec![2, 3],
        gap_branch: true,
    };
    let mut g = build_wasp(&cfg).unwrap();
    g.init_parameters(2);
    let x = random_input(3, Shape::new(1, 4, 8, 8));
    let report = check_graph_gradients(
        &mut g,
        &x,
        &GradCheckConfig {
            max_coords_per_tensor: 6,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn residual_batchnorm_graph_trains_with_correct_gradients() {
    // covers conv-without-bias, batchnorm (train mode), sum, relu
    let mut b = GraphBuilder::new("res");
    let input = b.input("input", 3);
    let c1 = b
        .add(
            "c1",
            LayerKind::Conv {
                out_ch: 3,
                in_ch: 3,
                kh: 3,
                kw: 3,
                stride: (1, 1),
                rate: (1, 1),
                padding: (1, 1),
                bias: false,
            },
            &[input],
        )
        .unwrap();
    let bn = b.add("bn", LayerKind::BatchNorm { channels: 3 }, &[c1]).unwrap();
    let sum = b.add("skip", LayerKind::Sum, &[bn, input]).unwrap();
    let relu = b.add("act", LayerKind::Relu, &[sum]).unwrap();
    let mut g = b.finish(relu).unwrap();
    g.init_parameters(4);

    let x = random_input(8, Shape::new(2, 3, 5, 5));
    // analytic gradients come from the train-mode backward; the shadow
    // must therefore also normalize with batch statistics, which eval-mode
    // forward_shadow does not. Check batchnorm's train path op-level here.
    let (y, cache) = ops::batchnorm_train_t(&x, &[1.0f32, 0.9, 1.2], &[0.0, 0.1, -0.2], 1e-5).unwrap();
    let proj = random_input(9, y.shape());
    let (gx, ggamma, gbeta) =
        ops::batchnorm_train_backward_t(&x, &[1.0f32, 0.9, 1.2], &cache, 1e-5, &proj);

    let proj64: TensorBase<f64> = proj.cast();
    let f = move |inputs: &[TensorBase<f64>]| {
        let gamma: Vec<f64> = inputs[1].data().to_vec();
        let beta: Vec<f64> = inputs[2].data().to_vec();
        let (y, _) = ops::batchnorm_train_t(&inputs[0], &gamma, &beta, 1e-5)?;
        Ok(y.data().iter().zip(proj64.data()).map(|(a, b)| a * b).sum())
    };
    let gamma_t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 0.9, 1.2]).unwrap();
    let beta_t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 0.1, -0.2]).unwrap();
    let ggamma_t = Tensor::from_vec(Shape::new(1, 1, 1, 3), ggamma).unwrap();
    let gbeta_t = Tensor::from_vec(Shape::new(1, 1, 1, 3), gbeta).unwrap();
    let report = crate::gradcheck::grad_check(
        f,
        &[x.cast(), gamma_t.cast(), beta_t.cast()],
        &[gx.cast(), ggamma_t.cast(), gbeta_t.cast()],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "bn max rel err {}", report.max_rel_err);

    // and the assembled residual graph learns: loss decreases under sgd
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target = random_input(10, Shape::new(2, 3, 5, 5));
    let mut last = f64::INFINITY;
    for step in 0..12 {
        g.zero_grads();
        let (out, trace) = g.forward_train(&[&x], &mut rng).unwrap();
        let diff = out.add_scaled(&target, -1.0).unwrap();
        let loss: f64 = diff.data().iter().map(|v| (*v as f64).powi(2)).sum();
        let grad = diff.scaled(2.0);
        g.backward(&trace, &grad).unwrap();
        for (p, gr) in g.params_and_grads_mut() {
            for (pv, gv) in p.data_mut().iter_mut().zip(gr.data()) {
                *pv -= 0.01 * gv;
            }
        }
        if step > 0 {
            assert!(loss <= last * 1.5, "loss exploding at step {step}");
        }
        last = loss;
    }
}
