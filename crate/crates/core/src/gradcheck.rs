//! Central-difference gradient verification.
//!
//! The checker perturbs coordinates of f64 shadow inputs and compares the
//! numeric slope of a scalar-valued closure against a supplied analytic
//! gradient. Relative error uses `|a - fd| / max(|a|, |fd|, 1e-6)`; the
//! floor keeps genuinely-zero gradients from dividing zero by zero.
//!
//! A central difference is only meaningful where the loss is smooth across
//! the probe window; a relu kink inside `[x-eps, x+eps]` shifts the
//! difference by up to the full slope jump, which says nothing about the
//! gradient at `x`. Along any single coordinate the loss here is either
//! piecewise linear (conv/relu/pool paths) or smooth (sigmoid gate paths),
//! which allows an exact per-coordinate screen:
//!
//! 1. The one-sided slopes over `[-eps, 0]` and `[0, +eps]` must agree;
//!    for a piecewise-linear coordinate they differ only when a kink lies
//!    in the window, and any kink small enough to slip under the gate
//!    biases the estimate by less than half the tolerance.
//! 2. A coordinate failing (1) is retried as a smooth one: the
//!    differences fd(eps), fd(eps/2), fd(eps/4) must contract like the
//!    quadratic truncation term (ratio 4); the Richardson-extrapolated
//!    slope is then scored. Kinked coordinates contract with ratio ~2 and
//!    are rejected instead.
//!
//! Rejected coordinates are resampled, and the run fails outright if more
//! than half of the attempts are rejected, so the screen cannot quietly
//! hollow out the check.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::TensorBase;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Coordinates to score per tensor; larger tensors are sampled.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    /// Minimum |relu pre-activation| required of a graph evaluation point.
    /// A kink sitting almost exactly at the point evades the Richardson
    /// screen (both probe widths report the same averaged slope), so such
    /// points are rejected before any coordinate is probed.
    pub kink_margin: f32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tolerance: 1e-4,
            max_coords_per_tensor: 32,
            seed: 0,
            kink_margin: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Candidate coordinates rejected by the smoothness screen.
    pub coords_nonsmooth: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords_checked > 0
            && self.max_rel_err.is_finite()
            && self.max_rel_err <= self.tolerance
    }
}

// one-sided slopes must agree to this relative gate for the window to
// count as linear; a slipped-through kink then biases the slope by at most
// half the gate, below the pass tolerance
const LINEAR_GATE: f64 = 1e-4;
// allowed deviation of the Richardson contraction ratio from the smooth
// value of 4
const CONTRACTION_SLACK: f64 = 0.5;

/// Compare `analytic` against central differences of `f` evaluated at `at`.
///
/// `f` must be a pure scalar function of its tensor arguments; `analytic`
/// holds one gradient tensor per argument, shape-matched to `at`.
pub fn grad_check<F>(
    f: F,
    at: &[TensorBase<f64>],
    analytic: &[TensorBase<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[TensorBase<f64>]) -> Result<f64>,
{
    if at.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "grad_check: {} inputs but {} gradient tensors",
            at.len(),
            analytic.len()
        )));
    }
    for (i, (x, g)) in at.iter().zip(analytic).enumerate() {
        if x.shape() != g.shape() {
            return Err(Error::shape(
                "grad_check",
                format!("input {} is {} but gradient is {}", i, x.shape(), g.shape()),
            ));
        }
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut point: Vec<TensorBase<f64>> = at.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut nonsmooth = 0usize;

    let f0 = f(&point)?;
    if !f0.is_finite() {
        return Err(Error::non_finite("grad_check closure evaluation"));
    }

    let eval = |point: &mut Vec<TensorBase<f64>>, ti: usize, ci: usize, delta: f64| -> Result<f64> {
        let orig = point[ti].data()[ci];
        point[ti].data_mut()[ci] = orig + delta;
        let v = f(point)?;
        point[ti].data_mut()[ci] = orig;
        if !v.is_finite() {
            return Err(Error::non_finite("grad_check closure evaluation"));
        }
        Ok(v)
    };

    for ti in 0..at.len() {
        let len = at[ti].len();
        let want = cfg.max_coords_per_tensor.min(len);
        // enough candidates to survive kink rejections, bounded
        let budget = (2 * want).max(4).min(len);
        let candidates: Vec<usize> = if len <= budget {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < budget {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };
        let mut scored = 0usize;
        let mut attempts = 0usize;
        for ci in candidates {
            if scored >= want {
                break;
            }
            attempts += 1;
            let eps = cfg.eps;
            let f_plus = eval(&mut point, ti, ci, eps)?;
            let f_minus = eval(&mut point, ti, ci, -eps)?;
            let s_right = (f_plus - f0) / eps;
            let s_left = (f0 - f_minus) / eps;
            let scale = s_right.abs().max(s_left.abs()).max(1e-6);

            let fd = if (s_right - s_left).abs() <= LINEAR_GATE * scale {
                // linear window: the central difference is the slope
                (s_right + s_left) / 2.0
            } else {
                // maybe smooth curvature: require quadratic contraction of
                // the truncation term before trusting an extrapolation
                let fd1 = (f_plus - f_minus) / (2.0 * eps);
                let fd2 = {
                    let p = eval(&mut point, ti, ci, eps / 2.0)?;
                    let m = eval(&mut point, ti, ci, -eps / 2.0)?;
                    (p - m) / eps
                };
                let fd4 = {
                    let p = eval(&mut point, ti, ci, eps / 4.0)?;
                    let m = eval(&mut point, ti, ci, -eps / 4.0)?;
                    (p - m) / (eps / 2.0)
                };
                let d1 = fd1 - fd2;
                let d2 = fd2 - fd4;
                // smooth: d1 = 4*d2 up to higher-order terms
                if d2.abs() > 1e-12 * scale && (d1 / d2 - 4.0).abs() <= CONTRACTION_SLACK * 4.0 {
                    fd4 + d2 / 3.0 // Richardson-extrapolated slope
                } else if d1.abs() <= 1e-9 * scale && d2.abs() <= 1e-9 * scale {
                    fd4 // flat to rounding at every width
                } else {
                    nonsmooth += 1;
                    continue;
                }
            };

            let a = analytic[ti].data()[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            scored += 1;
        }
        checked += scored;
        // more than half the candidates straddling kinks means the point is
        // unusable; fail loudly instead of passing on a hollow sample
        if 2 * scored < attempts {
            return Err(Error::InvalidArgument(format!(
                "grad_check: tensor {ti} rejected {} of {} candidate coordinates as \
                 non-smooth; evaluation point sits too close to activation kinks",
                attempts - scored,
                attempts
            )));
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
        coords_nonsmooth: nonsmooth,
        tolerance: cfg.tolerance,
    })
}

/// End-to-end gradient check of a whole graph: the scalar loss is a fixed
/// random projection of the graph output, the analytic gradients come from
/// the f32 backward pass, and the finite differences run through the f64
/// shadow forward. Checks every parameter tensor plus the graph input.
pub fn check_graph_gradients(
    graph: &mut crate::graph::ModuleGraph,
    x: &crate::tensor::Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xABCD);

    let (out, trace) = {
        let mut train_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        graph.forward_train(&[x], &mut train_rng)?
    };
    let margin = graph.relu_kink_margin(&trace);
    if margin < cfg.kink_margin {
        return Err(Error::InvalidArgument(format!(
            "grad_check: a relu pre-activation sits {margin:.2e} from zero, inside the \
             {:.2e} kink margin; redraw the evaluation point",
            cfg.kink_margin
        )));
    }
    let proj = {
        use rand::Rng;
        let data = (0..out.len())
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        crate::tensor::Tensor::from_vec(out.shape(), data)?
    };
    graph.zero_grads();
    let input_grads = graph.backward(&trace, &proj)?;

    // flatten parameters and their analytic gradients in node order
    let mut at: Vec<TensorBase<f64>> = Vec::new();
    let mut analytic: Vec<TensorBase<f64>> = Vec::new();
    let mut layout: Vec<usize> = Vec::new(); // tensors per node
    for id in 0..graph.nodes().len() {
        let ps = graph.param_tensors(id);
        layout.push(ps.len());
        for (p, g) in ps.iter().zip(graph.grad_tensors(id)) {
            at.push(p.cast());
            analytic.push(g.cast());
        }
    }
    at.push(x.cast());
    analytic.push(input_grads[0].cast());

    let buffers64 = graph.buffers_cast::<f64>();
    let proj64: TensorBase<f64> = proj.cast();
    let layout_ref = layout;
    let graph_ref: &crate::graph::ModuleGraph = graph;
    let f = move |inputs: &[TensorBase<f64>]| -> Result<f64> {
        let mut params: Vec<Vec<TensorBase<f64>>> = Vec::with_capacity(layout_ref.len());
        let mut cursor = 0usize;
        for count in &layout_ref {
            params.push(inputs[cursor..cursor + count].to_vec());
            cursor += count;
        }
        let x64 = &inputs[cursor];
        let y = graph_ref.forward_shadow(&params, &buffers64, &[x64])?;
        Ok(y.data()
            .iter()
            .zip(proj64.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    grad_check(f, &at, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_backward_t, conv2d_t};
    use crate::tensor::{Shape, Tensor};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random64(rng: &mut StdRng, shape: Shape) -> TensorBase<f64> {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TensorBase::from_vec(shape, data).unwrap()
    }

    #[test]
    fn linear_map_is_exact_to_machine_precision() {
        let mut rng = StdRng::seed_from_u64(2);
        let coef = random64(&mut rng, Shape::new(1, 1, 4, 4));
        let x = random64(&mut rng, Shape::new(1, 1, 4, 4));
        let c = coef.clone();
        let f = move |inputs: &[TensorBase<f64>]| {
            Ok(inputs[0]
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a * b)
                .sum())
        };
        let report = grad_check(f, &[x], &[coef], &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn dilated_conv_passes_at_default_tolerance() {
        let mut rng = StdRng::seed_from_u64(5);
        let x32 = {
            let data = (0..2 * 12 * 12).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Tensor::from_vec(Shape::new(1, 2, 12, 12), data).unwrap()
        };
        let k32 = {
            let data = (0..3 * 2 * 9).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
            Tensor::from_vec(Shape::new(3, 2, 3, 3), data).unwrap()
        };
        let rate = (6, 6);
        let pad = (6, 6);
        // scalar loss: weighted sum of the conv output
        let out_shape = Shape::new(1, 3, 12, 12);
        let proj = random64(&mut rng, out_shape);

        let x64 = x32.cast::<f64>();
        let k64 = k32.cast::<f64>();
        // analytic gradient via the f32 backward pass
        let go32: Tensor = proj.cast();
        let (gx, gk, _) =
            conv2d_backward_t(&x32, &k32, false, (1, 1), rate, pad, &go32).unwrap();

        let p = proj.clone();
        let f = move |inputs: &[TensorBase<f64>]| {
            let y = conv2d_t(&inputs[0], &inputs[1], None, (1, 1), rate, pad)?;
            Ok(y.data().iter().zip(p.data()).map(|(a, b)| a * b).sum())
        };
        let report = grad_check(
            f,
            &[x64, k64],
            &[gx.cast(), gk.cast()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = StdRng::seed_from_u64(9);
        let coef = random64(&mut rng, Shape::new(1, 1, 3, 3));
        let x = random64(&mut rng, Shape::new(1, 1, 3, 3));
        let corrupted = coef.scaled(1.01);
        let c = coef.clone();
        let f = move |inputs: &[TensorBase<f64>]| {
            Ok(inputs[0]
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a * b)
                .sum())
        };
        let report = grad_check(f, &[x], &[corrupted], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
    }
}
