//! Random-scale augmentation.
//!
//! Images are rescaled bilinearly, label maps with nearest-neighbor so the
//! class alphabet is preserved. Target dims snap to the nearest multiple
//! of 8 (minimum 8) so the stride-8 encoder and the decoder's x2/x4
//! upsampling chain stay consistent for every drawn scale.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pnm::{LabelMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.5,
            scale_max: 1.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "augment: need 0 < scale_min <= scale_max, got {}..{}",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

fn snap8(v: f64) -> usize {
    (((v / 8.0).round() as usize) * 8).max(8)
}

#[inline]
fn src_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let lo = (s.floor() as usize).min(in_len - 1);
    (lo, (lo + 1).min(in_len - 1), s - lo as f64)
}

/// Bilinear resample of an 8-bit image.
pub fn resize_image(img: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize_image: zero target".into()));
    }
    if img.h == out_h && img.w == out_w {
        return Ok(img.clone());
    }
    let mut out = RgbImage::new(out_h, out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = src_taps(oy, img.h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src_taps(ox, img.w, out_w);
            let mut rgb = [0u8; 3];
            for (c, out_c) in rgb.iter_mut().enumerate() {
                let v00 = img.pixel(y0, x0)[c] as f64;
                let v01 = img.pixel(y0, x1)[c] as f64;
                let v10 = img.pixel(y1, x0)[c] as f64;
                let v11 = img.pixel(y1, x1)[c] as f64;
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                *out_c = (top + (bot - top) * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(oy, ox, rgb);
        }
    }
    Ok(out)
}

/// Nearest-neighbor resample of a label map.
pub fn resize_labels(map: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize_labels: zero target".into()));
    }
    let mut out = LabelMap::new(out_h, out_w);
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * map.h as f64 / out_h as f64) as usize).min(map.h - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * map.w as f64 / out_w as f64) as usize).min(map.w - 1);
            out.set(oy, ox, map.at(sy, sx));
        }
    }
    Ok(out)
}

/// Apply one concrete scale factor to an image/label pair.
pub fn apply_scale(image: &RgbImage, labels: &LabelMap, scale: f64) -> Result<(RgbImage, LabelMap)> {
    if image.h != labels.h || image.w != labels.w {
        return Err(Error::shape(
            "apply_scale",
            format!("image {}x{} vs labels {}x{}", image.h, image.w, labels.h, labels.w),
        ));
    }
    if !(scale > 0.0) || image.h == 0 || image.w == 0 {
        return Err(Error::InvalidArgument(format!(
            "apply_scale: scale {scale} on {}x{} image",
            image.h, image.w
        )));
    }
    let oh = snap8(image.h as f64 * scale);
    let ow = snap8(image.w as f64 * scale);
    Ok((resize_image(image, oh, ow)?, resize_labels(labels, oh, ow)?))
}

/// Draw a scale uniformly from the configured range and apply it.
pub fn random_scale(
    image: &RgbImage,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(RgbImage, LabelMap)> {
    cfg.validate()?;
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    };
    apply_scale(image, labels, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker(h: usize, w: usize) -> (RgbImage, LabelMap) {
        let mut img = RgbImage::new(h, w);
        let mut map = LabelMap::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = (((y / 4) + (x / 4)) % 3) as u8;
                img.set_pixel(y, x, [v * 60, 255 - v * 40, 30 + v * 10]);
                map.set(y, x, v);
            }
        }
        (img, map)
    }

    #[test]
    fn unit_scale_is_identity() {
        let (img, map) = checker(32, 32);
        let (si, sm) = apply_scale(&img, &map, 1.0).unwrap();
        assert_eq!(si, img);
        assert_eq!(sm, map);
    }

    #[test]
    fn half_scale_of_64_is_32_and_labels_keep_their_alphabet() {
        let (img, map) = checker(64, 64);
        let (si, sm) = apply_scale(&img, &map, 0.5).unwrap();
        assert_eq!((si.h, si.w), (32, 32));
        let alphabet: std::collections::BTreeSet<u8> = map.data.iter().copied().collect();
        for v in &sm.data {
            assert!(alphabet.contains(v));
        }
    }

    #[test]
    fn same_seed_means_same_output() {
        let (img, map) = checker(32, 32);
        let cfg = AugmentConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            random_scale(&img, &map, &cfg, &mut rng).unwrap()
        };
        let (a_img, a_map) = run();
        let (b_img, b_map) = run();
        assert_eq!(a_img, b_img);
        assert_eq!(a_map, b_map);
    }

    #[test]
    fn scaled_dims_stay_stride8_compatible() {
        let (img, map) = checker(32, 32);
        for scale in [0.5, 0.61, 0.75, 0.99, 1.13, 1.5] {
            let (si, _) = apply_scale(&img, &map, scale).unwrap();
            assert_eq!(si.h % 8, 0);
            assert_eq!(si.w % 8, 0);
        }
    }
}
