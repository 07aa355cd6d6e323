use waspnet_core::crf::{refine_labels, two_region_instance, CrfParams};
use waspnet_core::metrics::miou_of;

fn main() {
    let params = CrfParams::default();
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for seed in 0..60u64 {
        let (unary, truth) = two_region_instance(seed, 6, 0.9);
        let before = miou_of(&unary.argmax(), &truth, 2).unwrap();
        let after = miou_of(&refine_labels(&unary, &params).unwrap(), &truth, 2).unwrap();
        let gain = after - before;
        if gain < worst {
            worst = gain;
        }
        if after < before {
            failures += 1;
            println!("seed {seed}: {before:.4} -> {after:.4} REGRESSION");
        } else if after == before {
            println!("seed {seed}: {before:.4} -> {after:.4} (no gain)");
        }
    }
    println!("60 seeds, {failures} regressions, worst gain {worst:.4}");
}
