use std::time::Instant;

use waspnet_core::graph::{build_network, NetworkConfig};
use waspnet_core::schedule::PolySchedule;
use waspnet_core::synth::{generate, SynthConfig};
use waspnet_core::train::{train, TrainConfig};

fn main() {
    let head = std::env::args().nth(1).unwrap_or_else(|| "wasp".into());
    let steps: usize = std::env::args()
        .nth(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(500);
    let base_lr: f64 = std::env::args()
        .nth(3)
        .map(|s| s.parse().unwrap())
        .unwrap_or(0.02);

    let train_set = generate(&SynthConfig {
        n_images: 200,
        size: 32,
        num_classes: 4,
        seed: 4242,
    })
    .unwrap();
    let val_set = generate(&SynthConfig {
        n_images: 24,
        size: 32,
        num_classes: 4,
        seed: 999_331,
    })
    .unwrap();

    let dropout: f32 = std::env::args()
        .nth(4)
        .map(|s| s.parse().unwrap())
        .unwrap_or(0.5);
    let mut cfg = NetworkConfig::toy(&head, 4).unwrap();
    cfg.decoder.dropout = dropout;
    let mut graph = build_network(&cfg).unwrap();
    graph.init_parameters(12345);
    println!("head {head}: {} params", graph.count_parameters());

    let mut tc = TrainConfig::new(steps, PolySchedule::new(base_lr, steps).unwrap(), 4);
    tc.seed = 777;
    tc.eval_every = 100;
    let t0 = Instant::now();
    let trace = train(&mut graph, &train_set, &val_set, &tc).unwrap();
    let dt = t0.elapsed();
    for row in trace.rows.iter().filter(|r| r.miou.is_some()) {
        println!(
            "step {:>4} lr {:.5} loss {:.4} miou {:.4}",
            row.step,
            row.lr,
            row.loss,
            row.miou.unwrap()
        );
    }
    println!(
        "head {head}: {} steps in {:.1}s ({:.0} ms/step), final miou {:?}",
        steps,
        dt.as_secs_f64(),
        dt.as_millis() as f64 / steps as f64,
        trace.final_miou()
    );

    let mut conf = waspnet_core::ConfusionMatrix::new(4);
    for (img, truth) in &val_set.items {
        let pred = waspnet_core::train::predict_labels(&graph, img).unwrap();
        conf.accumulate(&pred, truth).unwrap();
    }
    let report = waspnet_core::metrics::miou(&conf).unwrap();
    println!("per-class iou: {:?}", report.per_class);
}
