//! AdamW with decoupled weight decay and inspectable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(&mut self, steps: u64, state: BTreeMap<String, Moments>) {
        self.steps = steps;
        self.state = state;
    }

    /// One update of every parameter in `params` that has a gradient.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Moments outlive the step; keep them off the op graph.
            let g = g.detach();
            let entry = match self.state.get(name) {
                Some(s) => s.clone(),
                None => Moments {
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                },
            };
            if entry.m.dims() != var.dims() {
                return Err(Error::Shape(format!("optimizer state for `{name}` has the wrong shape")));
            }
            let m = ((entry.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((entry.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let decayed = (var.as_tensor() * (1.0 - lr * c.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.state.insert(name.clone(), Moments { m: m.detach(), v: v.detach() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, the first update has magnitude lr·|g|/(|g|+eps).
        let x = Var::from_vec(vec![1.0f64, -2.0], 2, &Device::Cpu).unwrap();
        let loss = (x.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&[("x".into(), x.clone())], &grads, 0.1).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-8 && (v[1] + 2.1).abs() < 1e-8);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decay_is_decoupled() {
        let x = Var::from_vec(vec![2.0f64], 1, &Device::Cpu).unwrap();
        let other = Var::zeros(1, DType::F64, &Device::Cpu).unwrap();
        let grads = other.as_tensor().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        // No gradient for x: untouched, including decay.
        opt.step(&[("x".into(), x.clone())], &grads, 0.5).unwrap();
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), vec![2.0]);
        // Zero gradient at the minimum: only the decay term moves x.
        let loss = (x.as_tensor() - 2.0).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&[("x".into(), x.clone())], &grads, 0.5).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v - 2.0 * (1.0 - 0.5 * 1e-2)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_vec(vec![3.0f64, -4.0], 2, &Device::Cpu).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&[("x".into(), x.clone())], &grads, 0.05).unwrap();
        }
        for v in x.as_tensor().to_vec1::<f64>().unwrap() {
            assert!(v.abs() < 1e-2, "{v}");
        }
    }
}
