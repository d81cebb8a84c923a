//! Training losses: partial cross-entropy, context affinity, structural
//! consistency and confidence-aware entropy minimization.
//!
//! All map arguments are (B, 1, H, W) tensors; images are (B, 3, H, W).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::{transport_tensor, AugmentationSpec, Label, TriStateMask};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityConfig {
    /// Side of the square neighbourhood (odd).
    pub window: usize,
    pub sigma_rgb: f64,
    pub sigma_xy: f64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            window: 5,
            sigma_rgb: 0.1,
            sigma_xy: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// Add the SSIM term to the L1 term.
    pub ssim: bool,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            ssim: true,
            ssim_window: 11,
            ssim_sigma: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CEMConfig {
    pub w_max: f64,
    pub w_weak: f64,
    /// Natural-log entropy below which an unlabeled pixel counts as confident.
    pub entropy_threshold: f64,
    pub ramp: u32,
    pub eps: f64,
}

impl Default for CEMConfig {
    fn default() -> Self {
        Self {
            w_max: 0.1,
            w_weak: 0.1,
            entropy_threshold: 0.5,
            ramp: 20,
            eps: 1e-8,
        }
    }
}

impl CEMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_threshold > 0.0 && self.entropy_threshold < std::f64::consts::LN_2) {
            return Err(Error::Config(format!(
                "entropy_threshold must lie in (0, ln 2), got {}",
                self.entropy_threshold
            )));
        }
        if self.ramp < 1 {
            return Err(Error::Config("ramp must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub affinity: AffinityConfig,
    pub consistency: ConsistencyConfig,
    pub cem: CEMConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.affinity;
        if a.window == 0 || a.window % 2 == 0 {
            return Err(Error::Config(format!("affinity window must be odd, got {}", a.window)));
        }
        if !(a.sigma_rgb > 0.0 && a.sigma_xy > 0.0) {
            return Err(Error::Config("affinity bandwidths must be positive".into()));
        }
        let c = &self.consistency;
        if c.ssim_window == 0 || !(c.ssim_sigma > 0.0) {
            return Err(Error::Config("ssim window and sigma must be positive".into()));
        }
        self.cem.validate()
    }
}

/// Per-step scalar summary, one record per line in the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pce: f64,
    pub ca: f64,
    pub sc: f64,
    pub cem_un: f64,
    pub cem_la: f64,
    pub lambda_t: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recompute_total(&mut self) {
        self.total = self.pce + self.ca + self.sc + self.lambda_t * (self.cem_un + self.cem_la);
    }
}

/// Scribble labels as dense tensors: `target` is 1 on manipulated scribbles,
/// `labeled` is 1 on any scribble.
#[derive(Clone, Debug)]
pub struct ScribbleTargets {
    pub target: Tensor,
    pub labeled: Tensor,
}

impl ScribbleTargets {
    pub fn from_masks(masks: &[&TriStateMask], dtype: DType) -> Result<Self> {
        let (h, w) = masks
            .first()
            .ok_or_else(|| Error::Empty("no scribble masks".into()))?
            .dim();
        let mut target = Vec::with_capacity(masks.len() * h * w);
        let mut labeled = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!("scribble {:?} vs {:?}", m.dim(), (h, w))));
            }
            for (_, label) in m.iter() {
                target.push((label == Label::Manipulated) as u8 as f32);
                labeled.push((label != Label::Unlabeled) as u8 as f32);
            }
        }
        let dev = candle_core::Device::Cpu;
        let shape = (masks.len(), 1, h, w);
        Ok(Self {
            target: Tensor::from_vec(target, shape, &dev)?.to_dtype(dtype)?,
            labeled: Tensor::from_vec(labeled, shape, &dev)?.to_dtype(dtype)?,
        })
    }

    pub fn unlabeled(&self) -> Result<Tensor> {
        Ok(self.labeled.affine(-1.0, 1.0)?)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Binary cross-entropy from logits, averaged over labeled pixels (0 if none).
pub fn pce(logits: &Tensor, targets: &ScribbleTargets) -> Result<Tensor> {
    same_shape(logits, &targets.labeled, "pce")?;
    let per_pixel = (nn::softplus(logits)? - (logits * &targets.target)?)?;
    let count = nn::scalar(&targets.labeled.sum_all()?)?;
    Ok(((per_pixel * &targets.labeled)?.sum_all()? / count.max(1.0))?)
}

/// Offsets covering each unordered pair in a `window`×`window` neighbourhood once.
pub fn half_window_offsets(window: usize) -> Vec<(usize, isize)> {
    let r = (window / 2) as isize;
    let mut out = Vec::new();
    for dy in 0..=r {
        for dx in -r..=r {
            if dy > 0 || dx > 0 {
                out.push((dy as usize, dx));
            }
        }
    }
    out
}

/// Gaussian colour/position affinity times absolute probability difference,
/// averaged over all in-bounds pixel pairs within the window.
pub fn ca(probs: &Tensor, image: &Tensor, cfg: &AffinityConfig) -> Result<Tensor> {
    let (b, _, h, w) = probs.dims4()?;
    let (bi, _, hi, wi) = image.dims4()?;
    if (b, h, w) != (bi, hi, wi) {
        return Err(Error::Shape(format!(
            "ca: probabilities {:?} vs image {:?}",
            probs.dims(),
            image.dims()
        )));
    }
    let image = image.to_dtype(probs.dtype())?.detach();
    let mut total: Option<Tensor> = None;
    let mut pairs = 0usize;
    for (dy, dx) in half_window_offsets(cfg.window) {
        let adx = dx.unsigned_abs();
        if dy >= h || adx >= w {
            continue;
        }
        let (oh, ow) = (h - dy, w - adx);
        // Pair (r, c) with (r + dy, c + dx).
        let (c0, c1) = if dx >= 0 { (0, adx) } else { (adx, 0) };
        let crop = |t: &Tensor, r: usize, c: usize| -> Result<Tensor> {
            Ok(t.narrow(2, r, oh)?.narrow(3, c, ow)?)
        };
        let di = (crop(&image, 0, c0)? - crop(&image, dy, c1)?)?;
        let spatial = ((dy * dy) as f64 + (adx * adx) as f64) / (2.0 * cfg.sigma_xy * cfg.sigma_xy);
        let weight = di
            .sqr()?
            .sum_keepdim(1)?
            .affine(-1.0 / (2.0 * cfg.sigma_rgb * cfg.sigma_rgb), -spatial)?
            .exp()?;
        let dp = (crop(probs, 0, c0)? - crop(probs, dy, c1)?)?.abs()?;
        let term = (weight * dp)?.sum_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
        pairs += b * oh * ow;
    }
    match total {
        Some(t) => Ok((t / pairs as f64)?),
        None => Ok(Tensor::zeros((), probs.dtype(), probs.device())?),
    }
}

/// Normalized 2-D Gaussian kernel of side `k`, shaped (1, 1, k, k).
pub fn gaussian_window(k: usize, sigma: f64, dtype: DType) -> Result<Tensor> {
    let c = (k as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut data = Vec::with_capacity(k * k);
    for a in &g {
        for b in &g {
            data.push(a * b / (s * s));
        }
    }
    Ok(Tensor::from_vec(data, (1, 1, k, k), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM of two single-channel maps over valid window positions. The window
/// shrinks to fit maps smaller than `window`.
pub fn ssim(x: &Tensor, y: &Tensor, window: usize, sigma: f64) -> Result<Tensor> {
    same_shape(x, y, "ssim")?;
    let (_, _, h, w) = x.dims4()?;
    let k = window.min(h).min(w);
    let g = gaussian_window(k, sigma, x.dtype())?;
    let blur = |t: &Tensor| -> Result<Tensor> { Ok(t.conv2d(&g, 0, 1, 1, 1)?) };
    let mx = blur(x)?;
    let my = blur(y)?;
    let mxx = (&mx * &mx)?;
    let myy = (&my * &my)?;
    let mxy = (&mx * &my)?;
    let vx = (blur(&(x * x)?)? - &mxx)?;
    let vy = (blur(&(y * y)?)? - &myy)?;
    let cov = (blur(&(x * y)?)? - &mxy)?;
    let num = ((mxy.affine(2.0, SSIM_C1)?) * (cov.affine(2.0, SSIM_C2)?))?;
    let den = (((&mxx + &myy)? + SSIM_C1)? * ((&vx + &vy)? + SSIM_C2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// Consistency between the prediction on `T(I)` and the transported prediction
/// on `I`, for one image.
pub fn sc(
    m1: &Tensor,
    m1_aug: &Tensor,
    spec: &AugmentationSpec,
    cfg: &ConsistencyConfig,
) -> Result<Tensor> {
    let moved = transport_tensor(m1, spec)?;
    same_shape(m1_aug, &moved, "sc")?;
    let l1 = (m1_aug - &moved)?.abs()?.mean_all()?;
    if !cfg.ssim {
        return Ok(l1);
    }
    let s = ssim(m1_aug, &moved, cfg.ssim_window, cfg.ssim_sigma)?;
    Ok((l1 + s.affine(-0.5, 0.5)?)?)
}

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn pixel_entropy(m: f64) -> f64 {
    let t = |p: f64| if p <= 0.0 { 0.0 } else { p * p.ln() };
    -(t(m) + t(1.0 - m))
}

/// Elementwise binary entropy of a probability map.
pub fn entropy_map(m: &Tensor) -> Result<Tensor> {
    let tiny = 1e-30;
    let q = m.affine(-1.0, 1.0)?;
    let a = (m * m.clamp(tiny, 1.0)?.log()?)?;
    let b = (&q * q.clamp(tiny, 1.0)?.log()?)?;
    Ok((a + b)?.neg()?)
}

/// `w_max · exp(-(1 - min(T, ramp)/ramp)^2)`.
pub fn ramp_weight(epoch: u32, cfg: &CEMConfig) -> f64 {
    let ramp = cfg.ramp.max(1) as f64;
    let t = (epoch as f64).min(ramp) / ramp;
    cfg.w_max * (-(1.0 - t) * (1.0 - t)).exp()
}

#[derive(Clone, Debug)]
pub struct CemTerms {
    pub un: Tensor,
    pub la: Tensor,
    pub lambda_t: f64,
    /// Unlabeled pixels admitted to `un` (1) or not (0).
    pub confident: Tensor,
}

pub fn cem(probs: &Tensor, targets: &ScribbleTargets, cfg: &CEMConfig, epoch: u32) -> Result<CemTerms> {
    same_shape(probs, &targets.labeled, "cem")?;
    let h = entropy_map(probs)?;
    let unlabeled = targets.unlabeled()?;
    let below = h
        .detach()
        .lt(cfg.entropy_threshold)?
        .to_dtype(probs.dtype())?;
    let confident = (below * &unlabeled)?;
    let n_conf = nn::scalar(&confident.sum_all()?)?;
    let un = ((&h * &confident)?.sum_all()? / (n_conf + cfg.eps))?;
    let n_lab = nn::scalar(&targets.labeled.sum_all()?)?;
    let la = ((&h * &targets.labeled)?.sum_all()? * (cfg.w_weak / (n_lab + cfg.eps)))?;
    Ok(CemTerms {
        un,
        la,
        lambda_t: ramp_weight(epoch, cfg),
        confident,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::Device;
    use ndarray::Array2;
    use std::f64::consts::LN_2;

    fn map(rows: &[&[f64]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        let v: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    fn targets(raw: &[&[u8]]) -> ScribbleTargets {
        let h = raw.len();
        let w = raw[0].len();
        let a = Array2::from_shape_fn((h, w), |(r, c)| raw[r][c]);
        let m = TriStateMask::from_encoded("t", a).unwrap();
        ScribbleTargets::from_masks(&[&m], DType::F64).unwrap()
    }

    #[test]
    fn pce_cases() {
        let t = targets(&[&[1, 0], &[255, 255]]);
        let uniform = map(&[&[0.0, 0.0], &[3.0, -7.0]]);
        assert!((scalar(&pce(&uniform, &t).unwrap()).unwrap() - LN_2).abs() < 1e-12);
        let confident = map(&[&[60.0, -60.0], &[0.0, 0.0]]);
        assert!(scalar(&pce(&confident, &t).unwrap()).unwrap() < 1e-20);
        let none = targets(&[&[255, 255]]);
        assert_eq!(scalar(&pce(&map(&[&[1.0, 2.0]]), &none).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn pce_matches_per_pixel_loop() {
        let raw: [&[u8]; 4] = [&[1, 255, 0, 255], &[255, 255, 255, 1], &[0, 255, 255, 255], &[255, 255, 1, 255]];
        let t = targets(&raw);
        let z: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..4).map(|c| ((r * 4 + c) as f64 * 0.77).sin() * 3.0).collect())
            .collect();
        let zr: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
        let got = scalar(&pce(&map(&zr), &t).unwrap()).unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for r in 0..4 {
            for c in 0..4 {
                if raw[r][c] == 255 {
                    continue;
                }
                let p = 1.0 / (1.0 + (-z[r][c]).exp());
                let y = (raw[r][c] == 1) as u8 as f64;
                sum += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                n += 1.0;
            }
        }
        assert_eq!(n, 5.0);
        assert!((got - sum / n).abs() < 1e-12);
    }

    #[test]
    fn offsets_cover_each_pair_once() {
        let o = half_window_offsets(5);
        assert_eq!(o.len(), 12);
        assert!(o.contains(&(0, 1)) && o.contains(&(2, -2)) && !o.contains(&(0, -1)));
    }

    #[test]
    fn ca_cases() {
        let cfg = AffinityConfig::default();
        let img = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let flat = Tensor::full(0.3f64, (1, 1, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&ca(&flat, &img, &cfg).unwrap()).unwrap(), 0.0);

        let img = Tensor::full(0.5f64, (1, 3, 1, 2), &Device::Cpu).unwrap();
        let got = scalar(&ca(&map(&[&[0.0, 1.0]]), &img, &cfg).unwrap()).unwrap();
        assert!((got - (-1.0f64 / 18.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn ca_grows_with_colour_bandwidth() {
        let img = Tensor::from_vec(
            (0..48).map(|i| ((i / 3) % 2) as f64 * 0.4).collect::<Vec<_>>(),
            (1, 4, 4, 3),
            &Device::Cpu,
        )
        .unwrap()
        .permute((0, 3, 1, 2))
        .unwrap()
        .contiguous()
        .unwrap();
        let p = Tensor::from_vec(
            (0..16).map(|i| (i % 2) as f64 * 0.8 + 0.1).collect::<Vec<_>>(),
            (1, 1, 4, 4),
            &Device::Cpu,
        )
        .unwrap();
        let mut cfg = AffinityConfig::default();
        let mut last = 0.0;
        for _ in 0..5 {
            let v = scalar(&ca(&p, &img, &cfg).unwrap()).unwrap();
            assert!(v >= last);
            last = v;
            cfg.sigma_rgb *= 2.0;
        }
    }

    #[test]
    fn sc_fixed_points_and_constants() {
        let cfg = ConsistencyConfig::default();
        let m = Tensor::rand(0f64, 1.0, (1, 1, 12, 12), &Device::Cpu).unwrap();
        let id = AugmentationSpec::Identity;
        assert_eq!(scalar(&sc(&m, &m, &id, &cfg).unwrap()).unwrap(), 0.0);
        let rot = AugmentationSpec::Rotation { degrees: 180 };
        let moved = transport_tensor(&m, &rot).unwrap();
        assert_eq!(scalar(&sc(&m, &moved, &rot, &cfg).unwrap()).unwrap(), 0.0);

        let l1_only = ConsistencyConfig { ssim: false, ..cfg };
        let a = Tensor::full(0.2f64, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let b = Tensor::full(0.7f64, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let v = scalar(&sc(&a, &b, &id, &l1_only).unwrap()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constants_matches_formula() {
        let (c1, c2) = (0.2f64, 0.7f64);
        let a = Tensor::full(c1, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let b = Tensor::full(c2, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let want = (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1);
        let got = scalar(&ssim(&a, &b, 11, 1.5).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn entropy_values() {
        assert!((pixel_entropy(0.5) - LN_2).abs() < 1e-15);
        assert_eq!(pixel_entropy(0.0), 0.0);
        assert_eq!(pixel_entropy(1.0), 0.0);
        let want = -(0.9f64 * 0.9f64.ln() + 0.1f64 * 0.1f64.ln());
        assert!((pixel_entropy(0.9) - want).abs() < 1e-15);
        assert!((pixel_entropy(0.9) - 0.325083).abs() < 1e-6);
        let t = entropy_map(&map(&[&[0.0, 0.5, 1.0, 0.9]])).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.0);
        assert!((v[1] - LN_2).abs() < 1e-15 && (v[3] - want).abs() < 1e-15);
    }

    #[test]
    fn ramp_values() {
        let cfg = CEMConfig::default();
        assert_eq!(ramp_weight(20, &cfg), 0.1);
        assert_eq!(ramp_weight(500, &cfg), 0.1);
        assert!((ramp_weight(0, &cfg) - 0.1 * (-1f64).exp()).abs() < 1e-15);
        let mut last = 0.0;
        for t in 0..30 {
            let v = ramp_weight(t, &cfg);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn cem_filter_cases() {
        let cfg = CEMConfig::default();
        let t = targets(&[&[255, 255]]);
        let r = cem(&map(&[&[0.5, 0.5]]), &t, &cfg, 0).unwrap();
        assert_eq!(scalar(&r.un).unwrap(), 0.0);
        let r = cem(&map(&[&[0.9, 0.5]]), &t, &cfg, 0).unwrap();
        assert!((scalar(&r.un).unwrap() - 0.325083).abs() < 1e-6);
        assert_eq!(r.confident.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 0.0]);

        let t = targets(&[&[1, 255]]);
        let r = cem(&map(&[&[0.5, 0.99]]), &t, &cfg, 0).unwrap();
        assert!((scalar(&r.la).unwrap() - 0.1 * LN_2).abs() < 1e-9);
        assert!((scalar(&r.un).unwrap() - pixel_entropy(0.99)).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let mut c = LossConfig::default();
        c.cem.entropy_threshold = 0.7;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.affinity.window = 4;
        assert!(c.validate().is_err());
    }
}
