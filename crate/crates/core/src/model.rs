//! The full localization network: backbone, per-stage prior modulation and the
//! gated fusion decoder.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ConvBackbone, FeatureExtractor};
use crate::discriminator::PriorPair;
use crate::error::{Error, Result};
use crate::fusion::{Decoder, FusionConfig, PredictionBundle};
use crate::modulation::{Fmm, ModulationConfig};
use crate::nn::ParamStore;
use crate::raster;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub modulation: ModulationConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.modulation.reduction == 0 {
            return Err(Error::Config("modulation.reduction must be positive".into()));
        }
        Ok(())
    }
}

pub struct Scaf {
    store: ParamStore,
    backbone: ConvBackbone,
    fmms: Vec<Fmm>,
    decoder: Decoder,
    cfg: ModelConfig,
}

impl Scaf {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let backbone = ConvBackbone::new(&root.sub("backbone"), &cfg.backbone)?;
        let fmms = cfg
            .backbone
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Fmm::new(&root.sub(format!("fmm{}", i + 1)), c, &cfg.modulation))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&root.sub("decoder"), cfg.backbone.widths, &cfg.fusion)?;
        Ok(Self {
            store,
            backbone,
            fmms,
            decoder,
            cfg: cfg.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn fmm(&self, stage: usize) -> &Fmm {
        &self.fmms[stage]
    }

    /// Keep every α, β nonnegative; call after each optimizer step.
    pub fn project_constraints(&self) -> Result<()> {
        for f in &self.fmms {
            f.params.clamp_nonneg()?;
        }
        Ok(())
    }

    /// Logit maps for a batch. `mp`, `ap` are (B, 1, h, w) priors at any resolution.
    pub fn forward(&self, images: &Tensor, mp: &Tensor, ap: &Tensor, train: bool) -> Result<PredictionBundle> {
        let (b, _, h, w) = images.dims4()?;
        if mp.dim(0)? != b || ap.dim(0)? != b {
            return Err(Error::Shape(format!(
                "{b} images but priors for {} / {}",
                mp.dim(0)?,
                ap.dim(0)?
            )));
        }
        let pyramid = self.backbone.extract(images)?;
        let xs = pyramid
            .stages
            .iter()
            .zip(&self.fmms)
            .map(|(f, m)| m.forward(f, mp, ap, train))
            .collect::<Result<Vec<_>>>()?;
        let xs: [Tensor; 4] = xs.try_into().expect("four stages");
        self.decoder.predict_heads(&xs, h, w)
    }
}

/// Stack per-image priors into (B, 1, h, w) tensors.
pub fn priors_to_tensors(priors: &[&PriorPair], dtype: DType) -> Result<(Tensor, Tensor)> {
    let mp: Vec<_> = priors.iter().map(|p| &p.mp).collect();
    let ap: Vec<_> = priors.iter().map(|p| &p.ap).collect();
    Ok((
        raster::maps_to_tensor(&mp, dtype)?,
        raster::maps_to_tensor(&ap, dtype)?,
    ))
}
