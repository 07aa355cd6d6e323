//! Dense CRF postprocessing: labeling energy and mean-field refinement.
//!
//! The pairwise potential between pixels i and j is Potts-gated:
//!
//! ```text
//! theta_ij = mu(xi,xj) * [ w1 * exp(-|pi-pj|^2/(2*sa^2) - |Ii-Ij|^2/(2*sb^2))
//!                        + w2 * exp(-|pi-pj|^2/(2*sg^2)) ]
//! ```
//!
//! with `mu = 1` when the labels differ and `0` otherwise. The first
//! (appearance) kernel compares positions and raw RGB intensities in
//! [0,255]; the second (smoothness) kernel compares positions only.
//!
//! Message passing is exact over all O(N^2) pixel pairs, sized for desk
//! scale (images up to ~128x128), with synchronous updates: every pixel's
//! new distribution is computed from the previous iterate, which makes the
//! result independent of pixel order and of the rayon thread count. The
//! energy sums pairwise terms over unordered pairs `i < j`; with these
//! symmetric kernels an ordered-pairs convention would just double the
//! pairwise column.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::miou_of;
use crate::pnm::{LabelMap, RgbImage};

/// Kernel weights, bandwidths and iteration budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Position bandwidth of the appearance kernel, pixels.
    pub sigma_alpha: f64,
    /// Color bandwidth of the appearance kernel, intensity units.
    pub sigma_beta: f64,
    /// Position bandwidth of the smoothness kernel, pixels.
    pub sigma_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w1: 4.0,
            w2: 3.0,
            sigma_alpha: 50.0,
            sigma_beta: 5.0,
            sigma_gamma: 3.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config("crf: kernel weights must be >= 0".into()));
        }
        if self.sigma_alpha <= 0.0 || self.sigma_beta <= 0.0 || self.sigma_gamma <= 0.0 {
            return Err(Error::Config("crf: bandwidths must be > 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("crf: iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities plus the image that drives the
/// appearance kernel. Probabilities are stored class-major (`[c][pixel]`
/// flattened) in f64.
#[derive(Debug, Clone)]
pub struct UnaryField {
    pub num_classes: usize,
    pub h: usize,
    pub w: usize,
    probs: Vec<f64>,
    image: RgbImage,
}

impl UnaryField {
    /// Build from probabilities laid out class-major. Each pixel's class
    /// column must sum to one within 1e-5.
    pub fn new(num_classes: usize, image: RgbImage, probs: Vec<f64>) -> Result<Self> {
        let n = image.h * image.w;
        if num_classes < 1 || probs.len() != num_classes * n {
            return Err(Error::shape(
                "unary field",
                format!(
                    "{} probabilities for {} pixels x {} classes",
                    probs.len(),
                    n,
                    num_classes
                ),
            ));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::non_finite("unary probabilities"));
        }
        for p in 0..n {
            let sum: f64 = (0..num_classes).map(|c| probs[c * n + p]).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "unary field: pixel {p} probabilities sum to {sum}"
                )));
            }
        }
        Ok(UnaryField {
            num_classes,
            h: image.h,
            w: image.w,
            probs,
            image,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f64 {
        self.probs[class * self.pixels() + pixel]
    }

    /// Per-pixel argmax labeling.
    pub fn argmax(&self) -> LabelMap {
        let n = self.pixels();
        let mut out = LabelMap::new(self.h, self.w);
        for p in 0..n {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..self.num_classes {
                let v = self.probs[c * n + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.data[p] = best as u8;
        }
        out
    }
}

#[inline]
fn color_dist2(a: [u8; 3], b: [u8; 3]) -> f64 {
    let mut acc = 0.0;
    for c in 0..3 {
        let d = a[c] as f64 - b[c] as f64;
        acc += d * d;
    }
    acc
}

/// Both Gaussian kernels for a pixel pair, given squared distances.
#[inline]
fn kernels(pos2: f64, col2: f64, params: &CrfParams) -> (f64, f64) {
    let k1 = (-pos2 / (2.0 * params.sigma_alpha * params.sigma_alpha)
        - col2 / (2.0 * params.sigma_beta * params.sigma_beta))
        .exp();
    let k2 = (-pos2 / (2.0 * params.sigma_gamma * params.sigma_gamma)).exp();
    (k1, k2)
}

const PROB_FLOOR: f64 = 1e-12;

/// Full labeling energy: unary `sum_i -log P(x_i)` plus Potts-gated
/// pairwise terms over unordered pixel pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub unary: f64,
    pub pairwise: f64,
    pub total: f64,
    /// Number of probabilities clamped at the 1e-12 floor before the log.
    pub clamped: usize,
}

pub fn energy(labeling: &LabelMap, unary: &UnaryField, params: &CrfParams) -> Result<EnergyReport> {
    params.validate()?;
    if labeling.h != unary.h || labeling.w != unary.w {
        return Err(Error::shape(
            "crf energy",
            format!(
                "labeling {}x{} vs unary {}x{}",
                labeling.h, labeling.w, unary.h, unary.w
            ),
        ));
    }
    let n = unary.pixels();
    let mut unary_sum = 0.0f64;
    let mut clamped = 0usize;
    for p in 0..n {
        let l = labeling.data[p] as usize;
        if l >= unary.num_classes {
            return Err(Error::InvalidArgument(format!(
                "crf energy: label {} out of {} classes",
                l, unary.num_classes
            )));
        }
        let mut prob = unary.prob(l, p);
        if prob < PROB_FLOOR {
            prob = PROB_FLOOR;
            clamped += 1;
        }
        unary_sum -= prob.ln();
    }

    let mut pairwise = 0.0f64;
    for i in 0..n {
        let (yi, xi) = (i / unary.w, i % unary.w);
        let ci = unary.image.pixel(yi, xi);
        for j in (i + 1)..n {
            if labeling.data[i] == labeling.data[j] {
                continue;
            }
            let (yj, xj) = (j / unary.w, j % unary.w);
            let dy = yi as f64 - yj as f64;
            let dx = xi as f64 - xj as f64;
            let (k1, k2) = kernels(
                dy * dy + dx * dx,
                color_dist2(ci, unary.image.pixel(yj, xj)),
                params,
            );
            pairwise += params.w1 * k1 + params.w2 * k2;
        }
    }

    Ok(EnergyReport {
        unary: unary_sum,
        pairwise,
        total: unary_sum + pairwise,
        clamped,
    })
}

/// Mean-field refinement: `iterations` synchronous rounds of exact message
/// passing under both kernels, returning class-major probabilities shaped
/// like the input.
///
/// With both kernel weights zero every update is the identity map on the
/// initial distribution, so the input is returned unchanged.
pub fn mean_field_refine(unary: &UnaryField, params: &CrfParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = unary.pixels();
    let classes = unary.num_classes;
    if params.w1 == 0.0 && params.w2 == 0.0 {
        return Ok(unary.probs().to_vec());
    }

    // -log P with the documented floor
    let log_unary: Vec<f64> = unary
        .probs()
        .iter()
        .map(|p| p.max(PROB_FLOOR).ln())
        .collect();

    // precomputed per-pixel features
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|p| ((p / unary.w) as f64, (p % unary.w) as f64))
        .collect();
    let colors: Vec<[u8; 3]> = (0..n)
        .map(|p| unary.image.pixel(p / unary.w, p % unary.w))
        .collect();

    let mut q = unary.probs().to_vec();
    for _ in 0..params.iterations {
        let prev = q.clone();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                // messages under each kernel, all classes at once
                let mut m1 = vec![0.0f64; classes];
                let mut m2 = vec![0.0f64; classes];
                let (yi, xi) = coords[i];
                let ci = colors[i];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let (yj, xj) = coords[j];
                    let dy = yi - yj;
                    let dx = xi - xj;
                    let (k1, k2) =
                        kernels(dy * dy + dx * dx, color_dist2(ci, colors[j]), params);
                    for c in 0..classes {
                        let qj = prev[c * n + j];
                        m1[c] += k1 * qj;
                        m2[c] += k2 * qj;
                    }
                }
                let s1: f64 = m1.iter().sum();
                let s2: f64 = m2.iter().sum();
                // Potts compatibility: penalty for class c sums messages of
                // every other class
                let mut logits = vec![0.0f64; classes];
                for c in 0..classes {
                    let penalty = params.w1 * (s1 - m1[c]) + params.w2 * (s2 - m2[c]);
                    logits[c] = log_unary[c * n + i] - penalty;
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                logits.iter().map(|l| (l - mx).exp() / z).collect()
            })
            .collect();
        for (i, row) in rows.iter().enumerate() {
            for c in 0..classes {
                q[c * n + i] = row[c];
            }
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("mean-field messages"));
        }
    }
    Ok(q)
}

/// Refine and return the argmax labeling.
pub fn refine_labels(unary: &UnaryField, params: &CrfParams) -> Result<LabelMap> {
    let q = mean_field_refine(unary, params)?;
    let refined = UnaryField {
        num_classes: unary.num_classes,
        h: unary.h,
        w: unary.w,
        probs: q,
        image: unary.image.clone(),
    };
    Ok(refined.argmax())
}

/// Exhaustive grid search over parameter candidates, scored by mean IoU of
/// the refined argmax against ground truth. Ties keep the earliest
/// candidate in grid order.
pub fn tune(
    grid: &[CrfParams],
    eval_set: &[(UnaryField, LabelMap)],
) -> Result<(CrfParams, f64)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("crf tune: empty grid".into()));
    }
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("crf tune: empty eval set".into()));
    }
    let mut best: Option<(CrfParams, f64)> = None;
    for params in grid {
        let mut sum = 0.0f64;
        for (unary, truth) in eval_set {
            let pred = refine_labels(unary, params)?;
            sum += miou_of(&pred, truth, unary.num_classes)?;
        }
        let score = sum / eval_set.len() as f64;
        if best.as_ref().map_or(true, |(_, b)| score > *b) {
            best = Some((*params, score));
        }
    }
    Ok(best.unwrap())
}

/// The documented tuning grid: w1 in 3..=6 step 1, sigma_alpha in
/// 30..=100 step 10, sigma_beta in 3..=6 step 1, w2 = sigma_gamma = 3.
/// Lexicographic order (w1, then sigma_alpha, then sigma_beta); 128 points.
pub fn tuning_grid(iterations: usize) -> Vec<CrfParams> {
    let mut grid = Vec::new();
    for w1 in [3.0, 4.0, 5.0, 6.0] {
        for sa_step in 0..8 {
            let sigma_alpha = 30.0 + 10.0 * sa_step as f64;
            for sigma_beta in [3.0, 4.0, 5.0, 6.0] {
                grid.push(CrfParams {
                    w1,
                    w2: 3.0,
                    sigma_alpha,
                    sigma_beta,
                    sigma_gamma: 3.0,
                    iterations,
                });
            }
        }
    }
    grid
}

/// An 8x8 two-region benchmark instance: dark left half, bright right
/// half, mild color texture; the unary assigns probability `confidence`
/// to the true class except at `flips` deterministically chosen pixels,
/// where it favors the wrong class instead.
pub fn two_region_instance(seed: u64, flips: usize, confidence: f64) -> (UnaryField, LabelMap) {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let (h, w) = (8usize, 8usize);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = RgbImage::new(h, w);
    let mut truth = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let class = usize::from(x >= w / 2);
            truth.set(y, x, class as u8);
            let base: [u8; 3] = if class == 0 { [45, 45, 45] } else { [205, 205, 205] };
            let mut px = [0u8; 3];
            for (o, b) in px.iter_mut().zip(base) {
                // mild texture, within the appearance-kernel bandwidth
                *o = (b as i16 + rng.gen_range(-4..=4)).clamp(0, 255) as u8;
            }
            image.set_pixel(y, x, px);
        }
    }

    let mut flipped = std::collections::BTreeSet::new();
    while flipped.len() < flips.min(n) {
        flipped.insert(rng.gen_range(0..n));
    }
    let mut probs = vec![0.0f64; 2 * n];
    for p in 0..n {
        let truth_class = truth.data[p] as usize;
        let favored = if flipped.contains(&p) {
            1 - truth_class
        } else {
            truth_class
        };
        probs[favored * n + p] = confidence;
        probs[(1 - favored) * n + p] = 1.0 - confidence;
    }
    let unary = UnaryField::new(2, image, probs).expect("constructed unary is valid");
    (unary, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_unary(h: usize, w: usize, classes: usize) -> UnaryField {
        let n = h * w;
        let probs = vec![1.0 / classes as f64; classes * n];
        UnaryField::new(classes, RgbImage::new(h, w), probs).unwrap()
    }

    #[test]
    fn zero_weights_make_energy_purely_unary() {
        let (unary, truth) = two_region_instance(1, 4, 0.9);
        let params = CrfParams {
            w1: 0.0,
            w2: 0.0,
            ..CrfParams::default()
        };
        let report = energy(&truth, &unary, &params).unwrap();
        assert_eq!(report.pairwise, 0.0);
        let want: f64 = (0..unary.pixels())
            .map(|p| -unary.prob(truth.data[p] as usize, p).max(1e-12).ln())
            .sum();
        assert!((report.total - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_labeling_has_zero_pairwise_energy() {
        let (unary, _) = two_region_instance(2, 4, 0.9);
        let all_zero = LabelMap::new(8, 8);
        let report = energy(&all_zero, &unary, &CrfParams::default()).unwrap();
        assert_eq!(report.pairwise, 0.0);
    }

    #[test]
    fn two_pixel_energy_matches_hand_evaluation() {
        let mut image = RgbImage::new(1, 2);
        image.set_pixel(0, 0, [10, 20, 30]);
        image.set_pixel(0, 1, [200, 100, 50]);
        // class-major probabilities: class0 at both pixels, then class1
        let probs = vec![0.7, 0.4, 0.3, 0.6];
        let unary = UnaryField::new(2, image, probs).unwrap();
        let labeling = LabelMap {
            h: 1,
            w: 2,
            data: vec![0, 1],
        };
        let params = CrfParams {
            w1: 4.0,
            w2: 3.0,
            sigma_alpha: 50.0,
            sigma_beta: 5.0,
            sigma_gamma: 3.0,
            iterations: 1,
        };
        let got = energy(&labeling, &unary, &params).unwrap();

        // independent scalar evaluation
        let unary_term = -(0.7f64.ln()) - (0.6f64.ln());
        let pos2 = 1.0f64;
        let col2 = 190.0f64 * 190.0 + 80.0 * 80.0 + 20.0 * 20.0;
        let k1 = (-pos2 / (2.0 * 50.0 * 50.0) - col2 / (2.0 * 5.0 * 5.0)).exp();
        let k2 = (-pos2 / (2.0 * 3.0 * 3.0)).exp();
        let want = unary_term + 4.0 * k1 + 3.0 * k2;
        assert!((got.total - want).abs() < 1e-9, "got {} want {}", got.total, want);
    }

    #[test]
    fn pairwise_kernel_is_symmetric() {
        let (unary, _) = two_region_instance(5, 0, 0.9);
        let params = CrfParams::default();
        for (i, j) in [(0usize, 9usize), (3, 40), (17, 18)] {
            let pi = (i / 8, i % 8);
            let pj = (j / 8, j % 8);
            let d2 = {
                let dy = pi.0 as f64 - pj.0 as f64;
                let dx = pi.1 as f64 - pj.1 as f64;
                dy * dy + dx * dx
            };
            let cij = color_dist2(
                unary.image().pixel(pi.0, pi.1),
                unary.image().pixel(pj.0, pj.1),
            );
            let cji = color_dist2(
                unary.image().pixel(pj.0, pj.1),
                unary.image().pixel(pi.0, pi.1),
            );
            assert_eq!(kernels(d2, cij, &params), kernels(d2, cji, &params));
        }
    }

    #[test]
    fn zero_weight_refinement_is_identity() {
        let (unary, _) = two_region_instance(3, 5, 0.85);
        let params = CrfParams {
            w1: 0.0,
            w2: 0.0,
            iterations: 7,
            ..CrfParams::default()
        };
        let q = mean_field_refine(&unary, &params).unwrap();
        assert_eq!(q, unary.probs().to_vec());
    }

    #[test]
    fn refined_distributions_stay_normalized() {
        let (unary, _) = two_region_instance(4, 6, 0.9);
        let q = mean_field_refine(&unary, &CrfParams::default()).unwrap();
        let n = unary.pixels();
        for p in 0..n {
            let sum: f64 = (0..2).map(|c| q[c * n + p]).sum();
            assert!((sum - 1.0).abs() <= 1e-5, "pixel {p} sums to {sum}");
        }
    }

    #[test]
    fn single_pixel_image_just_renormalizes_the_unary() {
        let image = RgbImage::new(1, 1);
        let unary = UnaryField::new(3, image, vec![0.2, 0.5, 0.3]).unwrap();
        let q = mean_field_refine(&unary, &CrfParams::default()).unwrap();
        for (a, b) in q.iter().zip(unary.probs()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_two_region_instance_improves_strictly() {
        let (unary, truth) = two_region_instance(11, 6, 0.9);
        let before = miou_of(&unary.argmax(), &truth, 2).unwrap();
        let after = miou_of(&refine_labels(&unary, &CrfParams::default()).unwrap(), &truth, 2).unwrap();
        assert!(
            after > before,
            "refinement did not improve: {before} -> {after}"
        );
    }

    #[test]
    fn class_relabeling_permutes_outputs() {
        let (unary, _) = two_region_instance(8, 5, 0.9);
        let n = unary.pixels();
        let q = mean_field_refine(&unary, &CrfParams::default()).unwrap();

        // swap the two classes in the unary
        let mut swapped = vec![0.0; 2 * n];
        for p in 0..n {
            swapped[p] = unary.prob(1, p);
            swapped[n + p] = unary.prob(0, p);
        }
        let unary_sw = UnaryField::new(2, unary.image().clone(), swapped).unwrap();
        let q_sw = mean_field_refine(&unary_sw, &CrfParams::default()).unwrap();
        for p in 0..n {
            assert!((q[p] - q_sw[n + p]).abs() < 1e-12);
            assert!((q[n + p] - q_sw[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn tune_single_point_grid_returns_it() {
        let (unary, truth) = two_region_instance(13, 5, 0.9);
        let grid = vec![CrfParams::default()];
        let (best, _) = tune(&grid, &[(unary, truth)]).unwrap();
        assert_eq!(best, CrfParams::default());
    }

    #[test]
    fn tune_finds_the_strict_maximizer() {
        let (unary, truth) = two_region_instance(17, 6, 0.9);
        // a do-nothing point and a sensible point; the latter must win
        let inert = CrfParams {
            w1: 0.0,
            w2: 0.0,
            ..CrfParams::default()
        };
        let good = CrfParams::default();
        let (best, score) = tune(&[inert, good], &[(unary.clone(), truth.clone())]).unwrap();
        let base = miou_of(&unary.argmax(), &truth, 2).unwrap();
        assert_eq!(best, good);
        assert!(score > base);
    }

    #[test]
    fn documented_grid_has_128_points() {
        assert_eq!(tuning_grid(10).len(), 4 * 8 * 4);
    }

    #[test]
    fn uniform_probabilities_survive_round_trip() {
        let unary = uniform_unary(4, 4, 3);
        let q = mean_field_refine(&unary, &CrfParams::default()).unwrap();
        let n = 16;
        for p in 0..n {
            let sum: f64 = (0..3).map(|c| q[c * n + p]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
