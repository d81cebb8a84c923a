//! Geometric transforms T(·) for the consistency branch.
//!
//! The same mapping is implemented twice: on (H, W, C) arrays for input images and
//! on (B, C, H, W) tensors (gather-based, differentiable) for prediction maps, so
//! `T(model(I))` is pixel-comparable to `model(T(I))`.

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Rotation,
    Scaling,
    HorizontalFlip,
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(AugmentKind::Rotation),
            "scaling" => Ok(AugmentKind::Scaling),
            "horizontal_flip" | "flip" => Ok(AugmentKind::HorizontalFlip),
            other => Err(Error::Invalid(format!("unsupported augmentation kind `{other}`"))),
        }
    }
}

/// One concrete transform. Rotations are counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSpec {
    Identity,
    Rotation { degrees: u32 },
    Scaling { factor: f64 },
    HorizontalFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentationSpec::Rotation { degrees } if ![90, 180, 270].contains(&degrees) => Err(
                Error::Invalid(format!("rotation must be 90, 180 or 270 degrees, got {degrees}")),
            ),
            AugmentationSpec::Scaling { factor } if !(SCALE_MIN..=SCALE_MAX).contains(&factor) => {
                Err(Error::Invalid(format!(
                    "scale factor must lie in [{SCALE_MIN}, {SCALE_MAX}], got {factor}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            AugmentationSpec::Rotation { degrees: 90 | 270 } => (w, h),
            AugmentationSpec::Scaling { factor } => (scaled(h, factor), scaled(w, factor)),
            _ => (h, w),
        }
    }

    /// Draw one transform of the given kind. Scale factors are restricted to those
    /// mapping `size` onto a multiple of `multiple` so the result stays a valid input.
    pub fn sample<R: Rng>(kind: AugmentKind, size: (usize, usize), multiple: usize, rng: &mut R) -> Self {
        match kind {
            AugmentKind::Rotation => AugmentationSpec::Rotation {
                degrees: [90, 180, 270][rng.random_range(0..3)],
            },
            AugmentKind::HorizontalFlip => AugmentationSpec::HorizontalFlip,
            AugmentKind::Scaling => {
                let (h, w) = size;
                let options: Vec<f64> = (1..=(2 * h.max(w) / multiple.max(1)).max(1))
                    .map(|k| (k * multiple) as f64 / h as f64)
                    .filter(|f| (SCALE_MIN..=SCALE_MAX).contains(f))
                    .filter(|&f| scaled(w, f) % multiple == 0 && scaled(h, f) % multiple == 0)
                    .collect();
                if options.is_empty() {
                    AugmentationSpec::Identity
                } else {
                    AugmentationSpec::Scaling {
                        factor: options[rng.random_range(0..options.len())],
                    }
                }
            }
        }
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationSpec::Identity => write!(f, "identity"),
            AugmentationSpec::Rotation { degrees } => write!(f, "rotation:{degrees}"),
            AugmentationSpec::Scaling { factor } => write!(f, "scaling:{factor}"),
            AugmentationSpec::HorizontalFlip => write!(f, "horizontal_flip"),
        }
    }
}

impl FromStr for AugmentationSpec {
    type Err = Error;

    /// `identity`, `rotation:<deg>`, `scaling:<factor>`, `horizontal_flip`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let parse_arg = |what: &str| -> Result<&str> {
            arg.ok_or_else(|| Error::Invalid(format!("`{kind}` needs a {what} argument")))
        };
        let spec = match kind {
            "identity" => AugmentationSpec::Identity,
            "horizontal_flip" | "flip" => AugmentationSpec::HorizontalFlip,
            "rotation" => AugmentationSpec::Rotation {
                degrees: parse_arg("degrees")?
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad rotation `{s}`")))?,
            },
            "scaling" => AugmentationSpec::Scaling {
                factor: parse_arg("factor")?
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad scale `{s}`")))?,
            },
            other => {
                return Err(Error::Invalid(format!(
                    "unsupported augmentation kind `{other}`"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn scaled(n: usize, factor: f64) -> usize {
    ((n as f64 * factor).round() as usize).max(1)
}

/// Source index of each output position for a nearest-neighbour resample.
fn nearest_index(out: usize, inp: usize) -> Vec<usize> {
    (0..out)
        .map(|o| (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1))
        .collect()
}

/// Source pixel `(row, col)` feeding output pixel `(r, c)` for index-only transforms.
fn source_of(spec: &AugmentationSpec, (h, w): (usize, usize), r: usize, c: usize) -> (usize, usize) {
    match *spec {
        AugmentationSpec::Identity | AugmentationSpec::Scaling { .. } => (r, c),
        AugmentationSpec::HorizontalFlip => (r, w - 1 - c),
        AugmentationSpec::Rotation { degrees: 90 } => (c, w - 1 - r),
        AugmentationSpec::Rotation { degrees: 180 } => (h - 1 - r, w - 1 - c),
        AugmentationSpec::Rotation { .. } => (h - 1 - c, r),
    }
}

/// Apply `spec` to an (H, W, C) array.
pub fn apply_transform(x: &Array3<f32>, spec: &AugmentationSpec, interp: Interp) -> Result<Array3<f32>> {
    spec.validate()?;
    let (h, w, ch) = x.dim();
    let (oh, ow) = spec.output_size(h, w);
    if let AugmentationSpec::Scaling { .. } = spec {
        return Ok(match interp {
            Interp::Bilinear => raster::resize_bilinear(x, oh, ow),
            Interp::Nearest => {
                let ri = nearest_index(oh, h);
                let ci = nearest_index(ow, w);
                Array3::from_shape_fn((oh, ow, ch), |(r, c, k)| x[[ri[r], ci[c], k]])
            }
        });
    }
    Ok(Array3::from_shape_fn((oh, ow, ch), |(r, c, k)| {
        let (sr, sc) = source_of(spec, (h, w), r, c);
        x[[sr, sc, k]]
    }))
}

/// Nearest-neighbour transform of a single-channel map.
pub fn apply_to_map(x: &Array2<f32>, spec: &AugmentationSpec) -> Result<Array2<f32>> {
    let (h, w) = x.dim();
    let x3 = x.clone().into_shape_with_order((h, w, 1)).expect("contiguous");
    let y = apply_transform(&x3, spec, Interp::Nearest)?;
    let (oh, ow, _) = y.dim();
    Ok(y.into_shape_with_order((oh, ow)).expect("contiguous"))
}

fn index_tensor(idx: impl IntoIterator<Item = usize>) -> Result<Tensor> {
    let v: Vec<u32> = idx.into_iter().map(|i| i as u32).collect();
    Ok(Tensor::new(v, &Device::Cpu)?)
}

/// Differentiable transform of a (B, C, H, W) tensor; scaling uses nearest neighbour.
pub fn transport_tensor(x: &Tensor, spec: &AugmentationSpec) -> Result<Tensor> {
    spec.validate()?;
    let (_, _, h, w) = x.dims4()?;
    let flip_h = || -> Result<Tensor> { Ok(x.index_select(&index_tensor((0..h).rev())?, 2)?) };
    let flip_w = |t: &Tensor| -> Result<Tensor> {
        Ok(t.index_select(&index_tensor((0..w).rev())?, 3)?)
    };
    let out = match *spec {
        AugmentationSpec::Identity => x.clone(),
        AugmentationSpec::HorizontalFlip => flip_w(x)?,
        AugmentationSpec::Rotation { degrees: 90 } => flip_w(x)?.transpose(2, 3)?.contiguous()?,
        AugmentationSpec::Rotation { degrees: 180 } => flip_w(&flip_h()?)?,
        AugmentationSpec::Rotation { .. } => flip_h()?.transpose(2, 3)?.contiguous()?,
        AugmentationSpec::Scaling { .. } => {
            let (oh, ow) = spec.output_size(h, w);
            x.index_select(&index_tensor(nearest_index(oh, h))?, 2)?
                .index_select(&index_tensor(nearest_index(ow, w))?, 3)?
        }
    };
    Ok(out)
}
