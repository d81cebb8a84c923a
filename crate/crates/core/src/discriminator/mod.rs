//! Manipulation discriminator: memory banks of patch and image-level features,
//! suppression-weighted nearest-neighbour scoring, and the manipulated /
//! authentic prior maps fed to the modulation stage.
//!
//! Two bank sets are built before training and then frozen: one from pristine
//! images (its distances give the manipulated prior MP) and one from manipulated
//! training images (its distances give the raw authentic prior, purified against MP).

mod io;
mod patch;
mod semantic;

use std::path::Path;

use candle_core::DType;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ConvBackbone, FeatureExtractor, SemanticHead};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::raster;

pub use io::{read_bank_file, write_bank_file, BankFileKind, BANK_FORMAT_VERSION};
pub use patch::{build_patch_bank, fuse_neighborhood, score, PatchBank, PatchGrid, UNIFORM_3X3};
pub use semantic::{build_semantic_bank, suppress, suppression_factor, SemanticBank};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Maximum entries per patch bank after subsampling.
    pub capacity: usize,
    /// Backbone stages (1-based) whose patches are banked; scores are averaged.
    pub stages: Vec<usize>,
    /// Purification: local cosine threshold.
    pub tau: f32,
    /// Purification: MP level above which a location counts as manipulated.
    pub high_mp: f32,
    /// Purification: side of the square cosine window.
    pub window: usize,
    /// Store bank entries in suppressed form so queries and entries are compared
    /// on the same scale.
    pub suppress_entries: bool,
    /// Seed of the frozen feature extractor used for banking and scoring.
    pub extractor_seed: u64,
    /// The extractor sees `image - box_mean(image)` over a (2r+1)² window;
    /// 0 feeds the raw image.
    pub highpass_radius: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 10_000,
            stages: vec![2, 3],
            tau: 0.7,
            high_mp: 0.5,
            window: 7,
            suppress_entries: true,
            extractor_seed: 0x5eed,
            highpass_radius: 2,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| !(1..=4).contains(s)) {
            return Err(Error::Config(format!(
                "bank stages must be a nonempty subset of 1..=4, got {:?}",
                self.stages
            )));
        }
        if self.capacity == 0 {
            return Err(Error::Config("bank capacity must be positive".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "purification window must be odd, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Manipulated prior and purified authentic prior, both in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PriorPair {
    pub mp: Array2<f32>,
    pub ap: Array2<f32>,
}

/// Per-image min-max normalization to [0, 1]; constant maps become zeros.
pub fn normalize_minmax(map: &Array2<f32>) -> Array2<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Zero the authentic prior where it locally mirrors a strong manipulated prior.
///
/// For each location the cosine similarity between the `window`×`window`
/// neighbourhoods of `mp` and `ap_raw` is computed (window truncated at borders);
/// where it exceeds `tau` and `mp > high_mp` the output is 0, else `ap_raw`.
pub fn purify(
    mp: &Array2<f32>,
    ap_raw: &Array2<f32>,
    tau: f32,
    high_mp: f32,
    window: usize,
) -> Result<Array2<f32>> {
    if mp.dim() != ap_raw.dim() {
        return Err(Error::Shape(format!(
            "prior maps differ: {:?} vs {:?}",
            mp.dim(),
            ap_raw.dim()
        )));
    }
    let (h, w) = mp.dim();
    let half = window / 2;
    let mut out = ap_raw.clone();
    for r in 0..h {
        for c in 0..w {
            if mp[[r, c]] <= high_mp {
                continue;
            }
            let (mut dot, mut nm, mut na) = (0.0f64, 0.0f64, 0.0f64);
            for rr in r.saturating_sub(half)..(r + half + 1).min(h) {
                for cc in c.saturating_sub(half)..(c + half + 1).min(w) {
                    let (m, a) = (mp[[rr, cc]] as f64, ap_raw[[rr, cc]] as f64);
                    dot += m * a;
                    nm += m * m;
                    na += a * a;
                }
            }
            let cos = if nm > 0.0 && na > 0.0 {
                dot / (nm.sqrt() * na.sqrt())
            } else {
                0.0
            };
            if cos > tau as f64 {
                out[[r, c]] = 0.0;
            }
        }
    }
    Ok(out)
}

/// One bank set: the image-level semantic bank plus a patch bank per banked stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BankSet {
    pub semantic: SemanticBank,
    pub patches: Vec<PatchBank>,
}

/// Features of a single image as seen by the discriminator.
struct ImageFeatures {
    /// Fused patch grid per banked stage.
    grids: Vec<PatchGrid>,
    /// Per-location semantic embedding at each banked stage's resolution.
    embeddings: Vec<PatchGrid>,
    descriptor: Vec<f32>,
    /// Grid size of stage 2, the resolution priors are emitted at.
    prior_size: (usize, usize),
}

pub struct Discriminator {
    extractor: ConvBackbone,
    head: SemanticHead,
    cfg: BankConfig,
    backbone_cfg: BackboneConfig,
    pub authentic: BankSet,
    pub manipulated: BankSet,
}

impl Discriminator {
    fn frozen_extractor(
        backbone_cfg: &BackboneConfig,
        cfg: &BankConfig,
    ) -> Result<(ConvBackbone, SemanticHead)> {
        cfg.validate()?;
        let store = ParamStore::new(DType::F32, cfg.extractor_seed);
        let root = store.root().sub("md");
        let extractor = ConvBackbone::new(&root.sub("backbone"), backbone_cfg)?;
        let head = SemanticHead::new(&root.sub("semantic"), backbone_cfg.widths[3])?;
        store.freeze("");
        Ok((extractor, head))
    }

    /// Build both bank sets. `authentic` are pristine images; `manipulated` are
    /// manipulated training images.
    pub fn build(
        backbone_cfg: &BackboneConfig,
        cfg: &BankConfig,
        authentic: &[&Array3<f32>],
        manipulated: &[&Array3<f32>],
    ) -> Result<Self> {
        let (extractor, head) = Self::frozen_extractor(backbone_cfg, cfg)?;
        let mut md = Self {
            extractor,
            head,
            cfg: cfg.clone(),
            backbone_cfg: backbone_cfg.clone(),
            authentic: placeholder_set(),
            manipulated: placeholder_set(),
        };
        md.authentic = md.build_set(authentic, "authentic", 1)?;
        md.manipulated = md.build_set(manipulated, "manipulated", 2)?;
        Ok(md)
    }

    /// Reassemble from stored banks.
    pub fn from_banks(
        backbone_cfg: &BackboneConfig,
        cfg: &BankConfig,
        authentic: BankSet,
        manipulated: BankSet,
    ) -> Result<Self> {
        let (extractor, head) = Self::frozen_extractor(backbone_cfg, cfg)?;
        for set in [&authentic, &manipulated] {
            if set.patches.len() != cfg.stages.len() {
                return Err(Error::Config(format!(
                    "bank set has {} patch banks but {} stages are configured",
                    set.patches.len(),
                    cfg.stages.len()
                )));
            }
            for (bank, &s) in set.patches.iter().zip(&cfg.stages) {
                if bank.dim() != backbone_cfg.widths[s - 1] {
                    return Err(Error::Config(format!(
                        "stage {s} bank has width {}, backbone stage width is {}",
                        bank.dim(),
                        backbone_cfg.widths[s - 1]
                    )));
                }
            }
        }
        Ok(Self {
            extractor,
            head,
            cfg: cfg.clone(),
            backbone_cfg: backbone_cfg.clone(),
            authentic,
            manipulated,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone_cfg
    }

    fn features(&self, image: &Array3<f32>) -> Result<ImageFeatures> {
        let residual;
        let input = if self.cfg.highpass_radius > 0 {
            residual = raster::highpass(image, self.cfg.highpass_radius);
            &residual
        } else {
            image
        };
        let x = raster::images_to_tensor(&[input], DType::F32)?;
        let pyramid = self.extractor.extract(&x)?;
        let deep = &pyramid.stages[3];
        let descriptor = self.head.reduce(deep)?.flatten_all()?.to_vec1::<f32>()?;
        let mut grids = Vec::new();
        let mut embeddings = Vec::new();
        for &s in &self.cfg.stages {
            let stage = &pyramid.stages[s - 1];
            let (_, _, h, w) = stage.dims4()?;
            let grid = PatchGrid::from_feature_map(stage, 0)?;
            grids.push(fuse_neighborhood(&grid, &UNIFORM_3X3)?);
            let deep_here = nn::resize_bilinear(deep, h, w)?;
            let emb = self.head.embed_locations(&deep_here)?;
            let dim = emb.dims()[3];
            embeddings.push(PatchGrid::new(h, w, dim, emb.flatten_all()?.to_vec1::<f32>()?)?);
        }
        let (_, _, ph, pw) = pyramid.stages[1].dims4()?;
        Ok(ImageFeatures {
            grids,
            embeddings,
            descriptor,
            prior_size: (ph, pw),
        })
    }

    fn build_set(&self, images: &[&Array3<f32>], what: &str, salt: u64) -> Result<BankSet> {
        if images.is_empty() {
            return Err(Error::Empty(format!("no {what} images to build banks from")));
        }
        let feats = images
            .iter()
            .map(|img| self.features(img))
            .collect::<Result<Vec<_>>>()?;
        let descriptors: Vec<Vec<f32>> = feats.iter().map(|f| f.descriptor.clone()).collect();
        let semantic = build_semantic_bank(&descriptors).map_err(|e| match e {
            Error::ZeroNorm { index } => Error::Invalid(format!(
                "{what} image {index} produced a zero semantic descriptor"
            )),
            other => other,
        })?;
        let mut patches = Vec::new();
        for (k, _) in self.cfg.stages.iter().enumerate() {
            let mut entries = Vec::new();
            for f in &feats {
                for (q, e) in f.grids[k].rows().zip(f.embeddings[k].rows()) {
                    let factor = if self.cfg.suppress_entries {
                        suppression_factor(e, &semantic)
                    } else {
                        1.0
                    };
                    entries.extend(q.iter().map(|&v| factor * v));
                }
            }
            let dim = feats[0].grids[k].dim;
            let seed = self.cfg.extractor_seed ^ (salt << 8) ^ k as u64;
            patches.push(PatchBank::from_entries(dim, entries, self.cfg.capacity, seed)?);
        }
        Ok(BankSet { semantic, patches })
    }

    fn raw_map(&self, feats: &ImageFeatures, set: &BankSet) -> Array2<f32> {
        let (ph, pw) = feats.prior_size;
        let mut acc = Array2::<f32>::zeros((ph, pw));
        for (k, bank) in set.patches.iter().enumerate() {
            let grid = &feats.grids[k];
            let mut map = Array2::<f32>::zeros((grid.h, grid.w));
            let mut q_sup = vec![0.0f32; grid.dim];
            for (i, (q, e)) in grid.rows().zip(feats.embeddings[k].rows()).enumerate() {
                let factor = suppression_factor(e, &set.semantic);
                for (d, &v) in q_sup.iter_mut().zip(q) {
                    *d = factor * v;
                }
                map[[i / grid.w, i % grid.w]] = bank.nearest_distance(&q_sup);
            }
            acc += &raster::resize_map_bilinear(&map, ph, pw);
        }
        acc / set.patches.len() as f32
    }

    /// Unnormalized distance maps against the authentic and manipulated bank sets.
    pub fn raw_scores(&self, image: &Array3<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let feats = self.features(image)?;
        Ok((
            self.raw_map(&feats, &self.authentic),
            self.raw_map(&feats, &self.manipulated),
        ))
    }

    /// Prior maps at stage-2 resolution (H/8 × W/8).
    pub fn prior_map(&self, image: &Array3<f32>) -> Result<PriorPair> {
        let (auth, manip) = self.raw_scores(image)?;
        let mp = normalize_minmax(&auth);
        let ap_raw = normalize_minmax(&manip);
        let ap = purify(&mp, &ap_raw, self.cfg.tau, self.cfg.high_mp, self.cfg.window)?;
        Ok(PriorPair { mp, ap })
    }

    /// Write every bank plus a JSON manifest into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        io::save_dir(self, dir)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        io::load_dir(dir)
    }
}

fn placeholder_set() -> BankSet {
    BankSet {
        semantic: SemanticBank::from_unit_rows(1, vec![1.0]).expect("unit row"),
        patches: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    #[test]
    fn purify_trivial_cases() {
        let zeros = Array2::<f32>::zeros((6, 6));
        let mp = Array2::from_shape_fn((6, 6), |(r, c)| ((r * c) % 5) as f32 / 4.0);
        assert_eq!(purify(&mp, &zeros, 0.7, 0.5, 7).unwrap(), zeros);
        let ap = Array2::from_shape_fn((6, 6), |(r, c)| ((r + c) % 3) as f32 / 2.0);
        assert_eq!(purify(&zeros, &ap, 0.7, 0.5, 7).unwrap(), ap);
    }

    #[test]
    fn purify_zeroes_exactly_the_overlap_block() {
        let mut mp = Array2::<f32>::zeros((12, 12));
        mp.slice_mut(s![3..7, 4..9]).fill(1.0);
        let mut ap_raw = mp.clone();
        ap_raw.slice_mut(s![9.., ..]).fill(0.3);
        let out = purify(&mp, &ap_raw, 0.7, 0.5, 7).unwrap();
        for ((r, c), &v) in out.indexed_iter() {
            if (3..7).contains(&r) && (4..9).contains(&c) {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, ap_raw[[r, c]]);
            }
        }
    }

    #[test]
    fn purify_never_increases() {
        let mp = Array2::from_shape_fn((9, 9), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        let ap = Array2::from_shape_fn((9, 9), |(r, c)| ((r * 5 + c) % 7) as f32 / 6.0);
        let out = purify(&mp, &ap, 0.5, 0.3, 3).unwrap();
        assert!(out.iter().zip(ap.iter()).all(|(o, a)| o <= a));
    }

    #[test]
    fn minmax_handles_constant_maps() {
        assert_eq!(normalize_minmax(&Array2::from_elem((3, 3), 4.0)), Array2::<f32>::zeros((3, 3)));
        let m = Array2::from_shape_vec((1, 3), vec![2.0, 4.0, 3.0]).unwrap();
        assert_eq!(normalize_minmax(&m), Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.5]).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = BankConfig::default();
        c.validate().unwrap();
        c.stages = vec![5];
        assert!(c.validate().is_err());
        let c = BankConfig { window: 4, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
