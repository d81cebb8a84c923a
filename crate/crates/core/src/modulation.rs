//! Prior-driven feature modulation.
//!
//! The two priors are folded into a probability response
//! `G = α·MP / (α·MP + β·AP + ε)`, turned into a per-pixel gain
//! `Ge = sigmoid(BN(conv1x1(G)))`, and applied residually:
//! `F = conv1x1(f + γ·Ge·f)`. Coordinate attention over `[F, f]` then yields the
//! stage output at the original stage width.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    pub epsilon: f64,
    /// Channel reduction ratio inside coordinate attention.
    pub reduction: usize,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub gamma_init: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            reduction: 8,
            alpha_init: 1.0,
            beta_init: 1.0,
            gamma_init: 0.0,
        }
    }
}

/// Learnable α, β (kept nonnegative), γ, and the fixed ε.
#[derive(Clone)]
pub struct ModulationParams {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub epsilon: f64,
}

impl ModulationParams {
    pub fn new(scope: &Scope, cfg: &ModulationConfig) -> Result<Self> {
        if !(cfg.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", cfg.epsilon)));
        }
        Ok(Self {
            alpha: scope.constant("alpha", &[1], cfg.alpha_init.max(0.0))?,
            beta: scope.constant("beta", &[1], cfg.beta_init.max(0.0))?,
            gamma: scope.constant("gamma", &[1], cfg.gamma_init)?,
            epsilon: cfg.epsilon,
        })
    }

    /// Project α and β back onto [0, ∞) after an optimizer update.
    pub fn clamp_nonneg(&self) -> Result<()> {
        for v in [&self.alpha, &self.beta] {
            let clamped = v.as_tensor().relu()?;
            v.set(&clamped)?;
        }
        Ok(())
    }
}

fn as_scalar_map(v: &Var) -> Result<Tensor> {
    Ok(v.as_tensor().reshape((1, 1, 1, 1))?)
}

/// Manipulated-region probability response; `mp`, `ap` are (B, 1, H, W).
pub fn response(mp: &Tensor, ap: &Tensor, p: &ModulationParams) -> Result<Tensor> {
    if mp.dims() != ap.dims() {
        return Err(Error::Shape(format!(
            "prior shapes differ: {:?} vs {:?}",
            mp.dims(),
            ap.dims()
        )));
    }
    let weighted_mp = mp.broadcast_mul(&as_scalar_map(&p.alpha)?)?;
    let weighted_ap = ap.broadcast_mul(&as_scalar_map(&p.beta)?)?;
    let denom = ((&weighted_mp + weighted_ap)? + p.epsilon)?;
    Ok((weighted_mp / denom)?)
}

/// Factorized (H-axis, W-axis) attention over a channel concatenation, projected
/// back to `out_channels`.
pub struct CoordAttention {
    reduce: Conv2d,
    attend_h: Conv2d,
    attend_w: Conv2d,
    proj: Conv2d,
    /// Force both attention maps to 1 (testing aid).
    pub bypass: bool,
}

impl CoordAttention {
    pub fn new(scope: &Scope, in_channels: usize, out_channels: usize, reduction: usize) -> Result<Self> {
        let mid = (in_channels / reduction.max(1)).max(8);
        Ok(Self {
            reduce: scope.conv2d("reduce", in_channels, mid, 1)?,
            attend_h: scope.conv2d("attend_h", mid, in_channels, 1)?,
            attend_w: scope.conv2d("attend_w", mid, in_channels, 1)?,
            proj: scope.conv2d("proj", in_channels, out_channels, 1)?,
            bypass: false,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.bypass {
            return self.proj.forward(x);
        }
        let (_, _, h, w) = x.dims4()?;
        let pooled_h = x.mean_keepdim(3)?; // (B, C, H, 1)
        let pooled_w = x.mean_keepdim(2)?.transpose(2, 3)?; // (B, C, W, 1)
        let y = self
            .reduce
            .forward(&Tensor::cat(&[pooled_h, pooled_w], 2)?)?
            .relu()?;
        let yh = y.narrow(2, 0, h)?;
        let yw = y.narrow(2, h, w)?.transpose(2, 3)?.contiguous()?;
        let ah = nn::sigmoid(&self.attend_h.forward(&yh)?)?;
        let aw = nn::sigmoid(&self.attend_w.forward(&yw)?)?;
        self.proj.forward(&x.broadcast_mul(&ah)?.broadcast_mul(&aw)?)
    }
}

/// Modulation for one backbone stage of width `channels`.
pub struct Fmm {
    pub params: ModulationParams,
    gain_conv: Conv2d,
    gain_norm: BatchNorm2d,
    out_conv: Conv2d,
    pub attention: CoordAttention,
}

impl Fmm {
    pub fn new(scope: &Scope, channels: usize, cfg: &ModulationConfig) -> Result<Self> {
        Ok(Self {
            params: ModulationParams::new(scope, cfg)?,
            gain_conv: scope.conv2d("gain_conv", 1, 1, 1)?,
            gain_norm: BatchNorm2d::new(&scope.sub("gain_norm"), 1)?,
            out_conv: scope.conv2d("out_conv", channels, channels, 1)?,
            attention: CoordAttention::new(&scope.sub("attention"), 2 * channels, channels, cfg.reduction)?,
        })
    }

    /// `F = conv1x1(f + γ·Ge·f)`, with `g` already at `f`'s spatial size.
    pub fn modulate(&self, f: &Tensor, g: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = f.dims4()?;
        let (_, gc, gh, gw) = g.dims4()?;
        if (gc, gh, gw) != (1, h, w) {
            return Err(Error::Shape(format!(
                "response map {:?} does not match feature map {:?}",
                g.dims(),
                f.dims()
            )));
        }
        let gain = nn::sigmoid(&self.gain_norm.forward(&self.gain_conv.forward(g)?, train)?)?;
        let scaled = gain.broadcast_mul(&as_scalar_map(&self.params.gamma)?)?;
        let residual = f.broadcast_mul(&scaled)?;
        self.out_conv.forward(&(f + residual)?)
    }

    pub fn coord_attention(&self, modulated: &Tensor, f: &Tensor) -> Result<Tensor> {
        if modulated.dims() != f.dims() {
            return Err(Error::Shape(format!(
                "modulated {:?} vs stage {:?}",
                modulated.dims(),
                f.dims()
            )));
        }
        self.attention.forward(&Tensor::cat(&[modulated, f], 1)?)
    }

    /// Full stage path: resize priors to `f`, respond, modulate, attend.
    pub fn forward(&self, f: &Tensor, mp: &Tensor, ap: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = f.dims4()?;
        let mp = nn::resize_bilinear(mp, h, w)?;
        let ap = nn::resize_bilinear(ap, h, w)?;
        let g = response(&mp, &ap, &self.params)?;
        let modulated = self.modulate(f, &g, train)?;
        self.coord_attention(&modulated, f)
    }
}
