//! SGD training loop for the toy-scale networks, plus evaluation helpers.
//!
//! Updates follow the momentum form `v = mu*v + g + wd*theta`,
//! `theta -= lr*v`, with the learning rate driven by the poly schedule.
//! Everything is seeded: batch draws, augmentation scales, and dropout
//! masks all come from one ChaCha stream, so identical configs produce
//! identical parameter bytes and metric traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::graph::ModuleGraph;
use crate::loss::cross_entropy;
use crate::metrics::{miou, ConfusionMatrix};
use crate::pnm::{LabelMap, RgbImage, IGNORE_LABEL};
use crate::schedule::{poly_lr, PolySchedule};
use crate::synth::Dataset;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: PolySchedule,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    /// Validation cadence in steps; the final step always evaluates.
    pub eval_every: usize,
    pub num_classes: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, schedule: PolySchedule, num_classes: usize) -> Self {
        TrainConfig {
            steps,
            batch_size: 8,
            schedule,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment: None,
            eval_every: 100,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTrace {
    pub rows: Vec<TraceRow>,
}

impl MetricTrace {
    /// Deterministic CSV: `step,lr,loss,miou` with fixed precision and an
    /// empty miou field on non-evaluation steps.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,miou\n");
        for r in &self.rows {
            let miou = r.miou.map_or(String::new(), |m| format!("{m:.6}"));
            out.push_str(&format!("{},{:.8},{:.6},{}\n", r.step, r.lr, r.loss, miou));
        }
        out
    }

    pub fn final_miou(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.miou)
    }
}

/// Stack image/label pairs into one batch tensor plus label maps.
fn to_batch(items: &[(RgbImage, LabelMap)]) -> Result<(Tensor, Vec<LabelMap>)> {
    let (h, w) = (items[0].0.h, items[0].0.w);
    let mut batch = Tensor::zeros(Shape::new(items.len(), 3, h, w));
    let mut labels = Vec::with_capacity(items.len());
    for (b, (img, map)) in items.iter().enumerate() {
        if img.h != h || img.w != w {
            return Err(Error::shape(
                "batch assembly",
                format!("item {b} is {}x{} but batch is {}x{}", img.h, img.w, h, w),
            ));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    batch.set(b, c, y, x, img.pixel(y, x)[c] as f32 / 255.0);
                }
            }
        }
        labels.push(map.clone());
    }
    Ok((batch, labels))
}

/// Forward one image in eval mode and take the per-pixel argmax.
pub fn predict_labels(graph: &ModuleGraph, image: &RgbImage) -> Result<LabelMap> {
    let x = image.to_tensor();
    let logits = graph.forward(&[&x])?;
    let s = logits.shape();
    let mut out = LabelMap::new(s.h, s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..s.c {
                let v = logits.at(0, c, y, x);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.set(y, x, best as u8);
        }
    }
    Ok(out)
}

/// Mean IoU of the graph's argmax predictions over a dataset.
pub fn evaluate(graph: &ModuleGraph, set: &Dataset, num_classes: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty dataset".into()));
    }
    let mut conf = ConfusionMatrix::new(num_classes);
    for (img, truth) in &set.items {
        let pred = predict_labels(graph, img)?;
        conf.accumulate(&pred, truth)?;
    }
    Ok(miou(&conf)?.miou)
}

/// Train `graph` in place; returns the per-step metric trace.
pub fn train(
    graph: &mut ModuleGraph,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricTrace> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("train: empty dataset".into()));
    }
    cfg.schedule.validate()?;
    if let Some(aug) = &cfg.augment {
        aug.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor> = graph
        .params_and_grads_mut()
        .iter()
        .map(|(p, _)| Tensor::zeros(p.shape()))
        .collect();
    let mut trace = MetricTrace::default();

    for step in 0..cfg.steps {
        // assemble the batch; with augmentation on, one scale per step so
        // the batch keeps uniform dims
        let picked: Vec<&(RgbImage, LabelMap)> = (0..cfg.batch_size)
            .map(|_| &train_set.items[rng.gen_range(0..train_set.items.len())])
            .collect();
        let items: Vec<(RgbImage, LabelMap)> = match &cfg.augment {
            None => picked.into_iter().cloned().collect(),
            Some(aug) => {
                let scale = if aug.scale_min == aug.scale_max {
                    aug.scale_min
                } else {
                    rng.gen_range(aug.scale_min..aug.scale_max)
                };
                picked
                    .into_iter()
                    .map(|(img, map)| crate::augment::apply_scale(img, map, scale))
                    .collect::<Result<_>>()?
            }
        };
        let (batch, labels) = to_batch(&items)?;

        let lr = poly_lr(step, &cfg.schedule)? as f32;
        graph.zero_grads();
        let (logits, trace_fwd) = graph
            .forward_train(&[&batch], &mut rng)
            .map_err(|e| match e {
                // exploded activations are a divergence, reported with the step
                Error::NonFinite { .. } => Error::Divergence { step },
                other => other,
            })?;
        let (loss, grad) = cross_entropy(&logits, &labels, IGNORE_LABEL)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        graph.backward(&trace_fwd, &grad)?;

        for (i, (param, grad)) in graph.params_and_grads_mut().into_iter().enumerate() {
            let v = &mut velocity[i];
            for ((pv, gv), vv) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.data_mut())
            {
                *vv = cfg.momentum * *vv + *gv + cfg.weight_decay * *pv;
                *pv -= lr * *vv;
                if !pv.is_finite() {
                    return Err(Error::Divergence { step });
                }
            }
        }

        let is_eval_step =
            (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || step + 1 == cfg.steps;
        let miou_val = if is_eval_step && !val_set.is_empty() {
            Some(evaluate(graph, val_set, cfg.num_classes)?)
        } else {
            None
        };
        trace.rows.push(TraceRow {
            step,
            lr: lr as f64,
            loss,
            miou: miou_val,
        });
    }
    Ok(trace)
}
