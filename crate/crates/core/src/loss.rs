//! Pixelwise softmax cross-entropy with an ignore label.

use crate::error::{Error, Result};
use crate::pnm::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Mean negative log softmax probability of the true class over scored
/// pixels, plus the gradient with respect to the logits. Pixels labeled
/// `ignore` contribute nothing to either.
pub fn cross_entropy_t<T: Scalar>(
    logits: &TensorBase<T>,
    labels: &[LabelMap],
    ignore: u8,
) -> Result<(f64, TensorBase<T>)> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} label maps for batch of {}", labels.len(), s.n),
        ));
    }
    for m in labels {
        if m.h != s.h || m.w != s.w {
            return Err(Error::shape(
                "cross_entropy",
                format!("label map {}x{} vs logits {}x{}", m.h, m.w, s.h, s.w),
            ));
        }
    }
    let classes = s.c;
    let plane = s.h * s.w;
    let ld = logits.data();

    // first pass: count scored pixels
    let mut scored = 0usize;
    for (b, m) in labels.iter().enumerate() {
        for l in &m.data {
            if *l == ignore {
                continue;
            }
            if *l as usize >= classes {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: label {} out of {} classes in image {}",
                    l, classes, b
                )));
            }
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::InvalidArgument(
            "cross_entropy: every pixel is ignored".into(),
        ));
    }
    let inv = 1.0 / scored as f64;

    let mut grad = TensorBase::<T>::zeros(s);
    let mut loss = 0.0f64;
    for b in 0..s.n {
        let m = &labels[b];
        for p in 0..plane {
            let l = m.data[p];
            if l == ignore {
                continue;
            }
            let mut mx = f64::NEG_INFINITY;
            for c in 0..classes {
                mx = mx.max(ld[(b * classes + c) * plane + p].to_f64());
            }
            let mut z = 0.0f64;
            for c in 0..classes {
                z += (ld[(b * classes + c) * plane + p].to_f64() - mx).exp();
            }
            let lz = z.ln() + mx;
            loss += lz - ld[(b * classes + l as usize) * plane + p].to_f64();
            for c in 0..classes {
                let softmax = (ld[(b * classes + c) * plane + p].to_f64() - lz).exp();
                let target = if c == l as usize { 1.0 } else { 0.0 };
                grad.data_mut()[(b * classes + c) * plane + p] =
                    T::from_f64((softmax - target) * inv);
            }
        }
    }
    loss *= inv;
    if !loss.is_finite() {
        return Err(Error::non_finite("cross_entropy loss"));
    }
    Ok((loss, grad))
}

pub fn cross_entropy(
    logits: &crate::tensor::Tensor,
    labels: &[LabelMap],
    ignore: u8,
) -> Result<(f64, crate::tensor::Tensor)> {
    cross_entropy_t(logits, labels, ignore)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn map_of(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap {
            h,
            w,
            data: data.to_vec(),
        }
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = Tensor::zeros(Shape::new(1, 3, 1, 2));
        logits.set(0, 1, 0, 0, 50.0);
        logits.set(0, 2, 0, 1, 50.0);
        let labels = [map_of(1, 2, &[1, 2])];
        let (loss, _) = cross_entropy(&logits, &labels, 255).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = Tensor::filled(Shape::new(1, 4, 2, 2), 0.3);
        let labels = [map_of(2, 2, &[0, 1, 2, 3])];
        let (loss, _) = cross_entropy(&logits, &labels, 255).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn two_pixel_three_class_case_matches_hand_computation() {
        let logits = Tensor::from_vec(
            Shape::new(1, 3, 1, 2),
            // channel-major: c0 at pixels (0,1), then c1, then c2
            vec![1.0, -0.5, 0.0, 2.0, -1.0, 0.5],
        )
        .unwrap();
        let labels = [map_of(1, 2, &[2, 0])];
        let (loss, grad) = cross_entropy(&logits, &labels, 255).unwrap();

        // scalar recomputation of the same quantity
        let pix = [(vec![1.0f64, 0.0, -1.0], 2usize), (vec![-0.5, 2.0, 0.5], 0)];
        let mut want = 0.0;
        for (logit, label) in &pix {
            let z: f64 = logit.iter().map(|v| v.exp()).sum();
            want += z.ln() - logit[*label];
        }
        want /= 2.0;
        assert!((loss - want).abs() < 1e-9, "loss {loss} want {want}");

        // gradient columns sum to zero per scored pixel
        for p in 0..2 {
            let col: f32 = (0..3).map(|c| grad.at(0, c, 0, p)).sum();
            assert!(col.abs() < 1e-6);
        }
    }

    #[test]
    fn ignored_pixels_contribute_nothing() {
        let mut logits = Tensor::zeros(Shape::new(1, 2, 1, 2));
        logits.set(0, 0, 0, 0, 3.0);
        logits.set(0, 1, 0, 1, -7.0); // would be expensive if scored
        let scored_only = [map_of(1, 2, &[0, 255])];
        let (loss_a, grad) = cross_entropy(&logits, &scored_only, 255).unwrap();
        assert_eq!(grad.at(0, 0, 0, 1), 0.0);
        assert_eq!(grad.at(0, 1, 0, 1), 0.0);

        let one_pixel = [map_of(1, 1, &[0])];
        let narrow = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 0.0]).unwrap();
        let (loss_b, _) = cross_entropy(&narrow, &one_pixel, 255).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-9);

        let all_ignored = [map_of(1, 2, &[255, 255])];
        assert!(cross_entropy(&logits, &all_ignored, 255).is_err());
    }
}
