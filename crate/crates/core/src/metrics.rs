//! Confusion-matrix accumulation and mean intersection-over-union.
//!
//! `IoU_c = TP_c / (TP_c + FN_c + FP_c)` per class; the mean runs over
//! classes that appear in the ground truth or the prediction. Classes
//! absent from both are excluded rather than scored as 0/0.

use crate::error::{Error, Result};
use crate::pnm::{LabelMap, IGNORE_LABEL};

/// Square count matrix; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    pub ignore_label: u8,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignore_label: IGNORE_LABEL,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.h != truth.h || pred.w != truth.w {
            return Err(Error::shape(
                "confusion accumulate",
                format!("pred {}x{} vs truth {}x{}", pred.h, pred.w, truth.h, truth.w),
            ));
        }
        for (p, t) in pred.data.iter().zip(&truth.data) {
            if *t == self.ignore_label {
                continue;
            }
            let (p, t) = (*p as usize, *t as usize);
            if t >= self.num_classes || p >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "confusion accumulate: label {}/{} out of {} classes",
                    t, p, self.num_classes
                )));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.count(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.count(t, c)).sum::<u64>() - self.count(c, c)
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.count(c, p)).sum::<u64>() - self.count(c, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// Per-class IoU; `None` for classes absent from truth and prediction.
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(conf: &ConfusionMatrix) -> Result<MiouReport> {
    if conf.total() == 0 {
        return Err(Error::InvalidArgument("miou: empty confusion matrix".into()));
    }
    let mut per_class = Vec::with_capacity(conf.num_classes());
    let mut sum = 0.0f64;
    let mut present = 0usize;
    for c in 0..conf.num_classes() {
        let tp = conf.true_positives(c);
        let fp = conf.false_positives(c);
        let fnn = conf.false_negatives(c);
        if tp + fp + fnn == 0 {
            per_class.push(None);
            continue;
        }
        let iou = tp as f64 / (tp + fp + fnn) as f64;
        per_class.push(Some(iou));
        sum += iou;
        present += 1;
    }
    Ok(MiouReport {
        miou: sum / present as f64,
        per_class,
    })
}

/// Convenience: accumulate one prediction/truth pair and return the mean IoU.
pub fn miou_of(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut conf = ConfusionMatrix::new(num_classes);
    conf.accumulate(pred, truth)?;
    Ok(miou(&conf)?.miou)
}
