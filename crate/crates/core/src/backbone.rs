//! Multi-scale feature extraction.
//!
//! The default extractor is a small convolutional net following the usual
//! pyramid-transformer stride schedule (4, 8, 16, 32), so everything downstream is
//! independent of which extractor produced the pyramid.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, Scope};

/// Total downsampling of the deepest stage.
pub const STRIDE: usize = 32;
pub const SEMANTIC_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub widths: [usize; 4],
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Conv,
            widths: [32, 64, 128, 256],
            norm_groups: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.widths.iter().enumerate() {
            if c == 0 || c % 4 != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} must be a positive multiple of 4",
                    i + 1
                )));
            }
            if c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} is not divisible by norm_groups {}",
                    i + 1,
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }
}

/// Stage features f_1..f_4; stage i has shape (B, C_i, H / 2^(i+1), W / 2^(i+1)).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: [Tensor; 4],
}

pub trait FeatureExtractor {
    fn extract(&self, images: &Tensor) -> Result<FeaturePyramid>;
    fn widths(&self) -> [usize; 4];
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            required: STRIDE,
        });
    }
    Ok(())
}

struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Stride-4 patch stem followed by four stages of two conv-norm-ReLU blocks.
pub struct ConvBackbone {
    stem: Conv2d,
    stages: Vec<[ConvBlock; 2]>,
    widths: [usize; 4],
}

impl ConvBackbone {
    pub fn new(scope: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths;
        let stem = scope.conv2d_strided("stem", 3, w[0], 4, 4, 0)?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let s = scope.sub(format!("stage{}", i + 1));
            let (cin, stride) = if i == 0 { (w[0], 1) } else { (w[i - 1], 2) };
            let block = |name: &str, cin: usize, stride: usize| -> Result<ConvBlock> {
                Ok(ConvBlock {
                    conv: s.conv2d_strided(name, cin, w[i], 3, stride, 1)?,
                    norm: GroupNorm::new(&s.sub(format!("{name}_norm")), cfg.norm_groups, w[i])?,
                })
            };
            stages.push([block("conv_a", cin, stride)?, block("conv_b", w[i], 1)?]);
        }
        Ok(Self {
            stem,
            stages,
            widths: w,
        })
    }
}

impl FeatureExtractor for ConvBackbone {
    fn extract(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_input_size(h, w)?;
        let mut x = self.stem.forward(images)?;
        let mut out = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            x = b.forward(&a.forward(&x)?)?;
            out.push(x.clone());
        }
        let stages: [Tensor; 4] = out.try_into().expect("four stages");
        Ok(FeaturePyramid { stages })
    }

    fn widths(&self) -> [usize; 4] {
        self.widths
    }
}

/// Global descriptor of the deepest stage: spatial mean, then a linear map to 256-d.
pub struct SemanticHead {
    proj: Linear,
}

impl SemanticHead {
    pub fn new(scope: &Scope, in_channels: usize) -> Result<Self> {
        Ok(Self {
            proj: scope.linear("proj", in_channels, SEMANTIC_DIM)?,
        })
    }

    /// (B, C, h, w) -> (B, 256)
    pub fn reduce(&self, stage4: &Tensor) -> Result<Tensor> {
        let pooled = stage4.flatten_from(2)?.mean(2)?;
        self.proj.forward(&pooled)
    }

    /// Per-location projection: (B, C, h, w) -> (B, h, w, 256).
    pub fn embed_locations(&self, features: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = features.dims4()?;
        let rows = features.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        Ok(self.proj.forward(&rows)?.reshape((b, h, w, SEMANTIC_DIM))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn backbone(widths: [usize; 4]) -> (ParamStore, ConvBackbone) {
        let store = ParamStore::new(DType::F32, 3);
        let cfg = BackboneConfig {
            widths,
            ..Default::default()
        };
        let b = ConvBackbone::new(&store.root().sub("backbone"), &cfg).unwrap();
        (store, b)
    }

    #[test]
    fn stage_shapes_follow_stride_schedule() {
        let (_, b) = backbone([8, 16, 24, 32]);
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let p = b.extract(&x).unwrap();
        let dims: Vec<_> = p.stages.iter().map(|s| s.dims().to_vec()).collect();
        assert_eq!(
            dims,
            [[2, 8, 16, 16], [2, 16, 8, 8], [2, 24, 4, 4], [2, 32, 2, 2]]
        );
    }

    #[test]
    fn default_widths_at_512() {
        let (_, b) = backbone([32, 64, 128, 256]);
        let x = Tensor::zeros((1, 3, 512, 512), DType::F32, &Device::Cpu).unwrap();
        let p = b.extract(&x).unwrap();
        let sizes: Vec<_> = p.stages.iter().map(|s| (s.dims()[1], s.dims()[2])).collect();
        assert_eq!(sizes, [(32, 128), (64, 64), (128, 32), (256, 16)]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let (_, b) = backbone([8, 8, 8, 8]);
        let x = Tensor::zeros((1, 3, 100, 100), DType::F32, &Device::Cpu).unwrap();
        let err = b.extract(&x).err().unwrap();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn widths_must_be_multiples_of_four() {
        for widths in [[8, 16, 30, 32], [0, 8, 8, 8]] {
            let cfg = BackboneConfig {
                widths,
                ..Default::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn semantic_descriptor_is_projected_mean() {
        let store = ParamStore::new(DType::F64, 1);
        let head = SemanticHead::new(&store.root().sub("sem"), 4).unwrap();
        let feat = Tensor::randn(0f64, 1.0, (1, 4, 3, 5), &Device::Cpu).unwrap();
        let got = head.reduce(&feat).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // brute-force pooling
        let v = feat.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: Vec<f64> = (0..4).map(|c| v[c * 15..(c + 1) * 15].iter().sum::<f64>() / 15.0).collect();
        let w = store.get("sem.proj.weight").unwrap().to_vec2::<f64>().unwrap();
        let b = store.get("sem.proj.bias").unwrap().to_vec1::<f64>().unwrap();
        for o in 0..SEMANTIC_DIM {
            let want: f64 = b[o] + (0..4).map(|c| w[o][c] * mean[c]).sum::<f64>();
            assert!((got[o] - want).abs() < 1e-12);
        }
        // spatial permutation invariance
        let perm = feat.flip(&[2, 3]).unwrap();
        let again = head.reduce(&perm).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_projects_the_constant() {
        let store = ParamStore::new(DType::F64, 1);
        let head = SemanticHead::new(&store.root().sub("sem"), 2).unwrap();
        let feat = Tensor::full(0.5f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let direct = head
            .proj
            .forward(&Tensor::full(0.5f64, (1, 2), &Device::Cpu).unwrap())
            .unwrap();
        let got = head.reduce(&feat).unwrap();
        let diff = (got - direct).unwrap().abs().unwrap().max_all().unwrap();
        assert!(crate::nn::scalar(&diff).unwrap() < 1e-15);
    }
}
