//! Synthetic segmentation data: colored geometric shapes on a textured
//! background with pixel-exact masks.
//!
//! Class 0 is the background. Class k >= 1 draws one shape per image whose
//! kind cycles through rectangle, ellipse, and thin bar; the bars cover
//! the delicate-boundary case that trips up smoothing postprocessors.
//! Classes are color-coded (fixed palette plus per-image jitter), so a
//! segmentation net can learn them at desk scale.
//!
//! Generation is deterministic: image i derives its own stream from
//! `seed` and `i`, so any prefix of a dataset regenerates byte-identically.
//!
//! Measured over >= 100 images at size 32 with 4 classes, background
//! frequency stays within [0.40, 0.95] and each shape class within
//! [0.01, 0.30] of the pixels (asserted in tests).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm::{self, LabelMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!(
                "synthetic dataset: size must be >= 32, got {}",
                self.size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic dataset: need >= 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.n_images == 0 {
            return Err(Error::Config("synthetic dataset: n_images must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<(RgbImage, LabelMap)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [205, 60, 50],  // warm red
    [45, 90, 210],  // blue
    [230, 205, 40], // yellow
    [160, 45, 200], // purple
    [40, 200, 190], // teal
    [240, 130, 30], // orange
];

const BG_BASE: [u8; 3] = [96, 112, 88];

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i16) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base) {
        let v = b as i16 + rng.gen_range(-amount..=amount);
        *o = v.clamp(0, 255) as u8;
    }
    out
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate image `index` of the dataset described by `cfg`.
pub fn generate_one(cfg: &SynthConfig, index: usize) -> Result<(RgbImage, LabelMap)> {
    cfg.validate()?;
    let size = cfg.size;
    let mut rng = image_rng(cfg.seed, index);
    let mut img = RgbImage::new(size, size);
    let mut map = LabelMap::new(size, size);

    // textured background
    for y in 0..size {
        for x in 0..size {
            img.set_pixel(y, x, jitter(&mut rng, BG_BASE, 18));
        }
    }

    for class in 1..cfg.num_classes {
        let color = PALETTE[(class - 1) % PALETTE.len()];
        let kind = (class - 1) % 3;
        // up to 8 placement attempts to avoid carving earlier shapes apart;
        // the last attempt draws regardless, keeping every class present
        for attempt in 0..8 {
            let mask: Vec<(usize, usize)> = match kind {
                0 => {
                    let h = rng.gen_range(size / 5..=size * 2 / 5);
                    let w = rng.gen_range(size / 5..=size * 2 / 5);
                    let y0 = rng.gen_range(0..size - h);
                    let x0 = rng.gen_range(0..size - w);
                    (y0..y0 + h)
                        .flat_map(|y| (x0..x0 + w).map(move |x| (y, x)))
                        .collect()
                }
                1 => {
                    let ry = rng.gen_range(size / 7..=size / 4) as f64;
                    let rx = rng.gen_range(size / 7..=size / 4) as f64;
                    let cy = rng.gen_range(ry as usize..size - ry as usize) as f64;
                    let cx = rng.gen_range(rx as usize..size - rx as usize) as f64;
                    let mut m = Vec::new();
                    for y in 0..size {
                        for x in 0..size {
                            let dy = (y as f64 - cy) / ry;
                            let dx = (x as f64 - cx) / rx;
                            if dy * dy + dx * dx <= 1.0 {
                                m.push((y, x));
                            }
                        }
                    }
                    m
                }
                _ => {
                    let thickness = rng.gen_range(5..=7.min(size / 4));
                    let length = rng.gen_range(size / 2..=size * 3 / 4);
                    let horizontal = rng.gen_bool(0.5);
                    let (bh, bw) = if horizontal {
                        (thickness, length)
                    } else {
                        (length, thickness)
                    };
                    let y0 = rng.gen_range(0..size - bh);
                    let x0 = rng.gen_range(0..size - bw);
                    (y0..y0 + bh)
                        .flat_map(|y| (x0..x0 + bw).map(move |x| (y, x)))
                        .collect()
                }
            };
            let overlap = mask.iter().filter(|(y, x)| map.at(*y, *x) != 0).count();
            if attempt < 7 && overlap * 5 > mask.len() {
                continue; // more than 20% covered, try another spot
            }
            for (y, x) in mask {
                img.set_pixel(y, x, jitter(&mut rng, color, 14));
                map.set(y, x, class as u8);
            }
            break;
        }
    }
    Ok((img, map))
}

/// Generate the whole dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let items = (0..cfg.n_images)
        .map(|i| generate_one(cfg, i))
        .collect::<Result<_>>()?;
    Ok(Dataset { items })
}

/// Write the dataset to `dir` in the documented layout:
/// `images/NNNNN.ppm` paired with `labels/NNNNN.pgm`.
pub fn make_synthetic_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&labels)?;
    for i in 0..cfg.n_images {
        let (img, map) = generate_one(cfg, i)?;
        pnm::write_ppm(images.join(format!("{i:05}.ppm")), &img)?;
        pnm::write_pgm(labels.join(format!("{i:05}.pgm")), &map)?;
    }
    Ok(())
}

/// Load a dataset directory (`images/*.ppm` + `labels/*.pgm`, paired by
/// file stem, sorted by name).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    let mut stems: Vec<String> = fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "ppm") {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .ppm images under {}",
            images_dir.display()
        )));
    }
    let mut items = Vec::with_capacity(stems.len());
    for stem in stems {
        let img = pnm::read_ppm(images_dir.join(format!("{stem}.ppm")))?;
        let map = pnm::read_pgm(labels_dir.join(format!("{stem}.pgm")))?;
        if img.h != map.h || img.w != map.w {
            return Err(Error::shape(
                format!("dataset item {stem}"),
                format!("image {}x{} vs labels {}x{}", img.h, img.w, map.h, map.w),
            ));
        }
        items.push((img, map));
    }
    Ok(Dataset { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = SynthConfig {
            n_images: 1,
            size: 32,
            num_classes: 4,
            seed: 99,
        };
        let (a_img, a_map) = generate_one(&cfg, 0).unwrap();
        let (b_img, b_map) = generate_one(&cfg, 0).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_map, b_map);
    }

    #[test]
    fn labels_stay_below_num_classes() {
        let cfg = SynthConfig {
            n_images: 10,
            size: 32,
            num_classes: 4,
            seed: 3,
        };
        for (_, map) in generate(&cfg).unwrap().items {
            assert!(map.data.iter().all(|l| (*l as usize) < 4));
        }
    }

    #[test]
    fn class_frequencies_stay_in_documented_bounds() {
        let cfg = SynthConfig {
            n_images: 100,
            size: 32,
            num_classes: 4,
            seed: 7,
        };
        let ds = generate(&cfg).unwrap();
        let mut counts = [0u64; 4];
        let mut total = 0u64;
        for (_, map) in &ds.items {
            for l in &map.data {
                counts[*l as usize] += 1;
                total += 1;
            }
        }
        let freq: Vec<f64> = counts.iter().map(|c| *c as f64 / total as f64).collect();
        assert!(freq[0] >= 0.40 && freq[0] <= 0.95, "bg {}", freq[0]);
        for k in 1..4 {
            assert!(freq[k] >= 0.01 && freq[k] <= 0.30, "class {k}: {}", freq[k]);
        }
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let bad = SynthConfig {
            n_images: 1,
            size: 16,
            num_classes: 4,
            seed: 0,
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            n_images: 1,
            size: 32,
            num_classes: 1,
            seed: 0,
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn disk_round_trip_preserves_items() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_images: 3,
            size: 32,
            num_classes: 4,
            seed: 11,
        };
        make_synthetic_dataset(dir.path(), &cfg).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let generated = generate(&cfg).unwrap();
        assert_eq!(loaded.items.len(), 3);
        for (a, b) in loaded.items.iter().zip(&generated.items) {
            assert_eq!(a, b);
        }
    }
}
