//! Procedural toy splices.
//!
//! Backgrounds come from a smooth family (flat colour plus low-frequency waves and
//! faint noise); pasted regions come from a distinct family (high-frequency stripes
//! with strong grain). A splice pastes a random rectangle of the second family onto
//! a background, and the rectangle is the dense ground-truth mask.

use std::f32::consts::TAU;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{synthesize_scribble, write_sample, Sample, Split, SplitPaths};
use crate::error::{Error, Result};
use crate::raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub size: usize,
    pub n_samples: usize,
    /// Pristine backgrounds written to the `authentic` split.
    pub n_authentic: usize,
    /// Scribble coverage per class, manipulated and authentic alike.
    pub coverage: f64,
    /// Set from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            size: 128,
            n_samples: 20,
            n_authentic: 20,
            coverage: 0.1,
            seed: 0,
        }
    }
}

/// Smooth background texture.
pub fn authentic_texture<R: Rng>(size: usize, rng: &mut R) -> Array3<f32> {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5f32..2.5),  // cycles per image
                rng.random_range(0.0..TAU),     // orientation
                rng.random_range(0.0..TAU),     // phase
                rng.random_range(0.03f32..0.07), // amplitude
            )
        })
        .collect();
    let noise = Normal::new(0.0f32, 0.012).expect("valid sigma");
    let n = size as f32;
    let mut img = Array3::zeros((size, size, 3));
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f32 / n, c as f32 / n);
            let shade: f32 = waves
                .iter()
                .map(|&(f, th, ph, a)| a * (TAU * f * (x * th.cos() + y * th.sin()) + ph).sin())
                .sum();
            for k in 0..3 {
                img[[r, c, k]] = (base[k] + shade + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// High-frequency striped texture, statistically unlike [`authentic_texture`].
pub fn alien_texture<R: Rng>(size: usize, rng: &mut R) -> Array3<f32> {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let freq = rng.random_range(12.0f32..20.0) * size as f32 / 128.0;
    let theta = rng.random_range(0.0..TAU);
    let amp = rng.random_range(0.12f32..0.2);
    let noise = Normal::new(0.0f32, 0.06).expect("valid sigma");
    let n = size as f32;
    let mut img = Array3::zeros((size, size, 3));
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f32 / n, c as f32 / n);
            let stripe = amp * (TAU * freq * (x * theta.cos() + y * theta.sin())).sin().signum();
            for k in 0..3 {
                img[[r, c, k]] = (base[k] + stripe + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Paste a random rectangle (sides in [size/4, size/2]) of an alien texture.
pub fn splice<R: Rng>(size: usize, rng: &mut R) -> (Array3<f32>, Array2<bool>) {
    let mut img = authentic_texture(size, rng);
    let donor = alien_texture(size, rng);
    let (lo, hi) = ((size / 4).max(1), (size / 2).max(1));
    let rh = rng.random_range(lo..=hi);
    let rw = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=size - rh);
    let left = rng.random_range(0..=size - rw);
    let mut mask = Array2::from_elem((size, size), false);
    mask.slice_mut(s![top..top + rh, left..left + rw]).fill(true);
    img.slice_mut(s![top..top + rh, left..left + rw, ..])
        .assign(&donor.slice(s![top..top + rh, left..left + rw, ..]));
    (raster::quantize(&img), mask)
}

/// Independent stream per (family, index) so sample k does not depend on n.
fn sample_rng(seed: u64, family: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((family << 32) | index as u64);
    rng
}

pub fn sample_id(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:04}")
}

/// Manipulated samples with dense masks and synthesized scribbles.
pub fn manipulated_samples(cfg: &FixtureConfig) -> Result<Vec<Sample>> {
    (0..cfg.n_samples)
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, 1, i);
            let (img, mask) = splice(cfg.size, &mut rng);
            let scribble = synthesize_scribble(&mask, cfg.coverage, rng.random())?;
            Sample::new(sample_id("splice_", i), img, scribble, Some(mask))
        })
        .collect()
}

/// Pristine backgrounds from the authentic family.
pub fn authentic_images(cfg: &FixtureConfig) -> Vec<(String, Array3<f32>)> {
    (0..cfg.n_authentic)
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, 2, i);
            (
                sample_id("authentic_", i),
                raster::quantize(&authentic_texture(cfg.size, &mut rng)),
            )
        })
        .collect()
}

/// Write the fixture under `root`: `train/` splices and `authentic/` backgrounds.
pub fn write_fixture(root: &Path, cfg: &FixtureConfig, force: bool) -> Result<()> {
    if cfg.n_samples == 0 {
        return Err(Error::Invalid("fixture needs at least one sample".into()));
    }
    if cfg.size % 32 != 0 {
        return Err(Error::Indivisible {
            height: cfg.size,
            width: cfg.size,
            required: 32,
        });
    }
    if root.exists() {
        let non_empty = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Invalid(format!(
                "{} exists and is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        for split in [Split::Train, Split::Authentic] {
            let dir = root.join(split.dir_name());
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
    }
    for sample in manipulated_samples(cfg)? {
        write_sample(root, Split::Train, &sample)?;
    }
    let images = SplitPaths::new(root, Split::Authentic).images;
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (id, img) in authentic_images(cfg) {
        raster::write_rgb(&images.join(format!("{id}.png")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splice_mask_matches_rectangle_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (img, mask) = splice(64, &mut rng);
        assert_eq!(img.dim(), (64, 64, 3));
        let area = mask.iter().filter(|&&v| v).count();
        assert!((16 * 16..=32 * 32).contains(&area));
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn samples_are_prefix_stable() {
        let small = FixtureConfig { size: 32, n_samples: 2, ..Default::default() };
        let big = FixtureConfig { n_samples: 4, ..small.clone() };
        let a = manipulated_samples(&small).unwrap();
        let b = manipulated_samples(&big).unwrap();
        assert_eq!(a[1].image, b[1].image);
        assert_ne!(b[2].image, b[3].image);
    }

    #[test]
    fn writes_layout_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("fx");
        let cfg = FixtureConfig { size: 32, n_samples: 3, n_authentic: 2, ..Default::default() };
        write_fixture(&root, &cfg, false).unwrap();
        let loaded = crate::dataio::load_dataset(&root, Split::Train).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded.iter().all(|s| s.dense_mask.is_some()));
        assert_eq!(crate::dataio::load_images(&root, Split::Authentic).unwrap().len(), 2);
        assert!(write_fixture(&root, &cfg, false).is_err());
        write_fixture(&root, &cfg, true).unwrap();
        let zero = FixtureConfig { n_samples: 0, ..cfg };
        assert!(write_fixture(&dir.path().join("z"), &zero, false).is_err());
    }
}
