//! Gated adaptive fusion and the prediction heads.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Scope};

/// How the local branch enhances the gated blend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enhance {
    /// `Me = O + sigmoid(O)·L`
    #[default]
    Attention,
    /// `Me = O + L`
    Plain,
}

/// Which map the background estimate is subtracted from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difference {
    /// `D = Me - Bg`
    #[default]
    Enhanced,
    /// `D = O - Bg`
    Blend,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub enhance: Enhance,
    pub difference: Difference,
}

fn require_div4(c: usize, what: &str) -> Result<()> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!(
            "{what} width {c} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

/// Top-down merge of a stage with the next coarser one.
pub struct FusePair {
    lateral: Conv2d,
    smooth: Conv2d,
}

impl FusePair {
    pub fn new(scope: &Scope, c_hi: usize, c_lo: usize) -> Result<Self> {
        require_div4(c_hi, "fused")?;
        Ok(Self {
            lateral: scope.conv2d("lateral", c_lo, c_hi, 1)?,
            smooth: scope.conv2d("smooth", c_hi, c_hi, 3)?,
        })
    }

    pub fn forward(&self, x_hi: &Tensor, x_lo: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x_hi.dims4()?;
        let (_, _, hl, wl) = x_lo.dims4()?;
        if (hl * 2, wl * 2) != (h, w) {
            return Err(Error::Shape(format!(
                "coarse map {hl}x{wl} is not half of {h}x{w}"
            )));
        }
        let up = nn::resize_bilinear(x_lo, h, w)?;
        self.smooth.forward(&(x_hi + self.lateral.forward(&up)?)?)
    }
}

/// Four equal channel groups of a fused map.
#[derive(Clone, Debug)]
pub struct SplitGroups {
    pub groups: [Tensor; 4],
}

impl SplitGroups {
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&self.groups, 1)?)
    }
}

pub fn split4(ex: &Tensor) -> Result<SplitGroups> {
    let c = ex.dim(1)?;
    if c == 0 || c % 4 != 0 {
        return Err(Error::Shape(format!("{c} channels cannot be split into 4 groups")));
    }
    let g = c / 4;
    let part = |k: usize| ex.narrow(1, k * g, g);
    Ok(SplitGroups {
        groups: [part(0)?, part(1)?, part(2)?, part(3)?],
    })
}

#[derive(Clone, Debug)]
pub struct GateOutputs {
    pub l: Tensor,
    pub c: Tensor,
    pub theta: Tensor,
    pub o: Tensor,
    pub me: Tensor,
    pub d: Tensor,
    pub ey: Tensor,
}

pub struct Gmm {
    local_a: Conv2d,
    local_b: Conv2d,
    context_a: Conv2d,
    context_b: Conv2d,
    pub gate: Conv2d,
    out: Conv2d,
    enhance: Enhance,
    difference: Difference,
}

impl Gmm {
    pub fn new(scope: &Scope, c: usize, cfg: &FusionConfig) -> Result<Self> {
        Ok(Self {
            local_a: scope.conv2d("local_a", c, c, 3)?,
            local_b: scope.conv2d("local_b", c, c, 3)?,
            context_a: scope.conv2d("context_a", c, c, 3)?,
            context_b: scope.conv2d("context_b", c, c, 3)?,
            gate: scope.conv2d("gate", 2 * c, 1, 1)?,
            out: scope.conv2d("out", c, c, 1)?,
            enhance: cfg.enhance,
            difference: cfg.difference,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<GateOutputs> {
        let l = self.local_b.forward(&self.local_a.forward(y)?.relu()?)?;
        let c = self
            .context_b
            .forward(&self.context_a.forward(&(&l + y)?)?.relu()?)?;
        let theta = nn::sigmoid(&self.gate.forward(&Tensor::cat(&[&l, &c], 1)?)?)?;
        let o = ((y + l.broadcast_mul(&theta)?)? + c.broadcast_mul(&theta.affine(-1.0, 1.0)?)?)?;
        let a = nn::sigmoid(&o)?;
        let background = (a.affine(-1.0, 1.0)? * &c)?;
        let me = match self.enhance {
            Enhance::Attention => (&o + (&a * &l)?)?,
            Enhance::Plain => (&o + &l)?,
        };
        let d = match self.difference {
            Difference::Enhanced => (&me - &background)?,
            Difference::Blend => (&o - &background)?,
        };
        let ey = self.out.forward(&(&me + &d)?)?;
        Ok(GateOutputs { l, c, theta, o, me, d, ey })
    }
}

/// Per-step intermediates of the progressive fusion.
#[derive(Clone, Debug)]
pub struct Progressive {
    pub ys: Vec<Tensor>,
    pub eys: Vec<Tensor>,
    pub ey: Tensor,
}

/// Channel split followed by four conv3 + gate steps.
pub struct Cfem {
    steps: Vec<Conv2d>,
    gates: Vec<Gmm>,
}

/// Input width of progressive step `k` for a fused width `c`.
pub fn step_input_width(c: usize, k: usize) -> usize {
    let g = c / 4;
    (4 - k) * g + if k > 0 { g } else { 0 }
}

impl Cfem {
    pub fn new(scope: &Scope, c: usize, cfg: &FusionConfig) -> Result<Self> {
        require_div4(c, "fused")?;
        let mut steps = Vec::with_capacity(4);
        let mut gates = Vec::with_capacity(4);
        for k in 0..4 {
            steps.push(scope.conv2d(&format!("step{k}"), step_input_width(c, k), c / 4, 3)?);
            gates.push(Gmm::new(&scope.sub(format!("gmm{k}")), c / 4, cfg)?);
        }
        Ok(Self { steps, gates })
    }

    pub fn progressive_fuse(&self, groups: &SplitGroups) -> Result<Progressive> {
        let mut ys = Vec::with_capacity(4);
        let mut eys: Vec<Tensor> = Vec::with_capacity(4);
        for k in 0..4 {
            let mut parts: Vec<&Tensor> = groups.groups[k..].iter().collect();
            if let Some(prev) = eys.last() {
                parts.push(prev);
            }
            let y = self.steps[k].forward(&Tensor::cat(&parts, 1)?)?;
            let ey = self.gates[k].forward(&y)?.ey;
            ys.push(y);
            eys.push(ey);
        }
        let ey = Tensor::cat(&eys, 1)?;
        Ok(Progressive { ys, eys, ey })
    }

    pub fn gate(&self, k: usize) -> &Gmm {
        &self.gates[k]
    }
}

/// One fusion level: merge a stage pair, then refine by grouped gating.
pub struct Gafm {
    pub pair: FusePair,
    pub cfem: Cfem,
}

impl Gafm {
    pub fn new(scope: &Scope, c_hi: usize, c_lo: usize, cfg: &FusionConfig) -> Result<Self> {
        Ok(Self {
            pair: FusePair::new(&scope.sub("pair"), c_hi, c_lo)?,
            cfem: Cfem::new(&scope.sub("cfem"), c_hi, cfg)?,
        })
    }

    pub fn forward(&self, x_hi: &Tensor, x_lo: &Tensor) -> Result<Tensor> {
        let ex = self.pair.forward(x_hi, x_lo)?;
        Ok(self.cfem.progressive_fuse(&split4(&ex)?)?.ey)
    }
}

/// Logit maps at input resolution, finest level first.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    pub m1: Tensor,
    pub m2: Tensor,
    pub m3: Tensor,
}

impl PredictionBundle {
    pub fn heads(&self) -> [&Tensor; 3] {
        [&self.m1, &self.m2, &self.m3]
    }
}

/// Three fusion levels over a four-stage pyramid, each with a 1×1 head.
pub struct Decoder {
    levels: Vec<Gafm>,
    heads: Vec<Conv2d>,
}

impl Decoder {
    pub fn new(scope: &Scope, widths: [usize; 4], cfg: &FusionConfig) -> Result<Self> {
        let mut levels = Vec::with_capacity(3);
        let mut heads = Vec::with_capacity(3);
        for i in 0..3 {
            levels.push(Gafm::new(&scope.sub(format!("level{i}")), widths[i], widths[i + 1], cfg)?);
            heads.push(scope.conv2d(&format!("head{i}"), widths[i], 1, 1)?);
        }
        Ok(Self { levels, heads })
    }

    pub fn level(&self, i: usize) -> &Gafm {
        &self.levels[i]
    }

    pub fn predict_heads(&self, xs: &[Tensor; 4], out_h: usize, out_w: usize) -> Result<PredictionBundle> {
        let mut maps = Vec::with_capacity(3);
        for (i, (level, head)) in self.levels.iter().zip(&self.heads).enumerate() {
            let ey = level.forward(&xs[i], &xs[i + 1])?;
            maps.push(nn::resize_bilinear(&head.forward(&ey)?, out_h, out_w)?);
        }
        let m3 = maps.pop().expect("three levels");
        let m2 = maps.pop().expect("three levels");
        let m1 = maps.pop().expect("three levels");
        Ok(PredictionBundle { m1, m2, m3 })
    }
}

/// Sum of every element.
pub fn channel_sum(t: &Tensor) -> Result<f64> {
    nn::scalar(&t.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, ParamStore};
    use candle_core::{DType, Device};

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let dev = Device::Cpu;
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n)
            .map(|i| ((i as f64 + seed as f64 * 0.37) * 12.9898).sin() * 0.9)
            .collect();
        Tensor::from_vec(v, shape, &dev).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    fn zero_all(store: &ParamStore) {
        for (_, v) in store.params() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn split_round_trip_and_indexing() {
        let x = randn((2, 8, 3, 3), 1);
        let s = split4(&x).unwrap();
        for (k, g) in s.groups.iter().enumerate() {
            assert_eq!(g.dims(), &[2, 2, 3, 3]);
            assert_eq!(max_abs_diff(g, &x.narrow(1, 2 * k, 2).unwrap()), 0.0);
        }
        assert_eq!(max_abs_diff(&s.concat().unwrap(), &x), 0.0);
        let total: f64 = s.groups.iter().map(|g| channel_sum(g).unwrap()).sum();
        assert!((total - channel_sum(&x).unwrap()).abs() < 1e-9);
        assert!(split4(&randn((1, 6, 2, 2), 0)).is_err());
    }

    #[test]
    fn step_widths() {
        for c in [8, 16, 64, 256] {
            let g = c / 4;
            assert_eq!(step_input_width(c, 0), c);
            assert_eq!(step_input_width(c, 1), c);
            assert_eq!(step_input_width(c, 2), 2 * g + g);
            assert_eq!(step_input_width(c, 3), 2 * g);
        }
    }

    #[test]
    fn zero_parameter_trace() {
        let store = ParamStore::new(DType::F64, 0);
        let gmm = Gmm::new(&store.root(), 4, &FusionConfig::default()).unwrap();
        zero_all(&store);
        let y = randn((1, 4, 5, 5), 2);
        let g = gmm.forward(&y).unwrap();
        assert_eq!(scalar(&g.l.abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&g.c.abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&g.theta, &g.theta.ones_like().unwrap().affine(0.5, 0.0).unwrap()), 0.0);
        assert_eq!(max_abs_diff(&g.o, &y), 0.0);
        assert_eq!(max_abs_diff(&g.me, &g.o), 0.0);
        assert_eq!(max_abs_diff(&g.d, &g.me), 0.0);
        assert_eq!(scalar(&g.ey.abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn saturated_gate_passes_local_branch() {
        let store = ParamStore::new(DType::F64, 3);
        let gmm = Gmm::new(&store.root(), 4, &FusionConfig::default()).unwrap();
        gmm.gate.bias.set(&Tensor::new(&[1e3f64], &Device::Cpu).unwrap()).unwrap();
        let y = randn((1, 4, 6, 6), 4);
        let g = gmm.forward(&y).unwrap();
        assert_eq!(max_abs_diff(&g.o, &(&y + &g.l).unwrap()), 0.0);
        let theta = g.theta.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(theta.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn gate_is_open_interval_on_random_input() {
        let store = ParamStore::new(DType::F64, 5);
        let gmm = Gmm::new(&store.root(), 8, &FusionConfig::default()).unwrap();
        let g = gmm.forward(&randn((2, 8, 4, 4), 6)).unwrap();
        let theta = g.theta.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(theta.iter().all(|&t| t > 0.0 && t < 1.0));
        assert_eq!(g.theta.dims(), &[2, 1, 4, 4]);
        assert_eq!(g.ey.dims(), &[2, 8, 4, 4]);
    }

    #[test]
    fn fuse_pair_zero_branch_and_shapes() {
        let store = ParamStore::new(DType::F64, 7);
        let pair = FusePair::new(&store.root(), 64, 128).unwrap();
        let hi = randn((1, 64, 32, 32), 1);
        let lo = Tensor::zeros((1, 128, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let e = pair.forward(&hi, &lo).unwrap();
        assert_eq!(e.dims(), &[1, 64, 32, 32]);
        // The lateral bias still enters; zero it to isolate the branch.
        pair.lateral.bias.set(&pair.lateral.bias.as_tensor().zeros_like().unwrap()).unwrap();
        let e = pair.forward(&hi, &lo).unwrap();
        assert!(max_abs_diff(&e, &pair.smooth.forward(&hi).unwrap()) < 1e-12);
        assert!(FusePair::new(&store.root().sub("bad"), 6, 8).is_err());
        assert!(pair.forward(&hi, &randn((1, 128, 8, 8), 0)).is_err());
    }

    #[test]
    fn last_group_reaches_every_step() {
        let store = ParamStore::new(DType::F64, 9);
        let cfem = Cfem::new(&store.root(), 8, &FusionConfig::default()).unwrap();
        let x = randn((1, 8, 4, 4), 3);
        let mut zeroed = split4(&x).unwrap();
        let base = cfem.progressive_fuse(&zeroed).unwrap();
        zeroed.groups[3] = zeroed.groups[3].zeros_like().unwrap();
        let pert = cfem.progressive_fuse(&zeroed).unwrap();
        for k in 0..4 {
            assert!(max_abs_diff(&base.ys[k], &pert.ys[k]) > 0.0, "step {k}");
        }
        assert_eq!(base.ey.dims(), &[1, 8, 4, 4]);
    }

    #[test]
    fn heads_are_full_resolution_and_distinct() {
        let store = ParamStore::new(DType::F64, 11);
        let widths = [8, 16, 24, 32];
        let dec = Decoder::new(&store.root(), widths, &FusionConfig::default()).unwrap();
        let xs = [
            randn((1, 8, 16, 16), 1),
            randn((1, 16, 8, 8), 2),
            randn((1, 24, 4, 4), 3),
            randn((1, 32, 2, 2), 4),
        ];
        let p = dec.predict_heads(&xs, 64, 64).unwrap();
        for m in p.heads() {
            assert_eq!(m.dims(), &[1, 1, 64, 64]);
        }
        assert!(max_abs_diff(&p.m1, &p.m2) > 0.0);
        assert!(max_abs_diff(&p.m2, &p.m3) > 0.0);
    }
}
