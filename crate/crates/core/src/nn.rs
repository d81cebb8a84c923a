//! Parameter registry and the small set of layers the model is assembled from.
//!
//! Parameters live in a [`ParamStore`] under dotted names (`fusion.0.gmm.1.gate.weight`).
//! Layers hold cheap clones of the underlying [`Var`]s, so optimizer updates and
//! checkpoint restores through the store are visible to every layer.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    rng: ChaCha8Rng,
}

/// Named, seeded store of trainable parameters and non-trainable buffers.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                frozen: BTreeSet::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("param store poisoned")
    }

    /// All parameters, including frozen ones, in name order.
    pub fn params(&self) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters the optimizer is allowed to touch, in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .params
            .iter()
            .filter(|(k, _)| !inner.frozen.iter().any(|p| k.starts_with(p.as_str())))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.lock()
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.lock();
        inner
            .params
            .get(name)
            .or_else(|| inner.buffers.get(name))
            .cloned()
    }

    /// Overwrite the value of a parameter or buffer in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Freeze every parameter whose name starts with `prefix` (`""` freezes all).
    pub fn freeze(&self, prefix: &str) {
        self.lock().frozen.insert(prefix.to_string());
    }

    pub fn unfreeze_all(&self) {
        self.lock().frozen.clear();
    }

    pub fn num_scalars(&self) -> usize {
        self.lock().params.values().map(|v| v.elem_count()).sum()
    }

    fn register(&self, name: String, value: Tensor, buffer: bool) -> Result<Var> {
        let var = Var::from_tensor(&value)?;
        let mut inner = self.lock();
        let map = if buffer {
            &mut inner.buffers
        } else {
            &mut inner.params
        };
        if map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        map.insert(name, var.clone());
        Ok(var)
    }

    fn uniform(&self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = {
            let mut inner = self.lock();
            (0..n)
                .map(|_| inner.rng.random_range(-bound..=bound))
                .collect()
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope {
        Scope {
            store: self.store.clone(),
            prefix: self.name(&name.to_string()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let t = self.store.uniform(shape, bound)?;
        self.store.register(self.name(name), t, false)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.store.register(self.name(name), t, false)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        self.store.register(self.name(name), t, true)
    }

    pub fn conv2d(&self, name: &str, cin: usize, cout: usize, k: usize) -> Result<Conv2d> {
        Conv2d::new(&self.sub(name), cin, cout, k, 1, k / 2)
    }

    pub fn conv2d_strided(
        &self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d> {
        Conv2d::new(&self.sub(name), cin, cout, k, stride, padding)
    }

    pub fn linear(&self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let s = self.sub(name);
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Linear {
            weight: s.uniform("weight", &[dout, din], bound)?,
            bias: s.uniform("bias", &[dout], bound)?,
        })
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    fn new(
        scope: &Scope,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        // PyTorch's default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", &[cout, cin, k, k], bound)?,
            bias: scope.uniform("bias", &[cout], bound)?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// `x`: (N, din) -> (N, dout)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
}

impl GroupNorm {
    pub fn new(scope: &Scope, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: scope.constant("gamma", &[channels], 1.0)?,
            beta: scope.constant("beta", &[channels], 0.0)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Batch normalization over (N, H, W) with running statistics for inference.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant("gamma", &[channels], 1.0)?,
            beta: scope.constant("beta", &[channels], 0.0)?,
            running_mean: scope.buffer("running_mean", &[channels], 0.0)?,
            running_var: scope.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 {
                (var.detach() * (n / (n - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Row weights of a 1-D bilinear resampling (half-pixel centers, edge clamped).
/// Entry `[o * inp + i]` is the weight of input `i` in output `o`.
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a (B, C, H, W) tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rw = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let rh = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let y = x.broadcast_matmul(&rw.contiguous()?)?;
    Ok(rh.broadcast_matmul(&y)?)
}

/// Scalar value of a single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(8, 4), (4, 8), (5, 3), (16, 2), (1, 7)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_keeps_constants() {
        let x = Tensor::full(0.25f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 16, 8).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 8]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn store_names_and_freezing() {
        let store = ParamStore::new(DType::F64, 1);
        let root = store.root();
        root.sub("a").conv2d("c", 2, 3, 3).unwrap();
        root.sub("b").linear("l", 4, 2).unwrap();
        let names: Vec<_> = store.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.c.bias", "a.c.weight", "b.l.bias", "b.l.weight"]);
        store.freeze("a.");
        assert_eq!(store.trainable().len(), 2);
        store.freeze("");
        assert!(store.trainable().is_empty());
        assert!(root.sub("a").conv2d("c", 2, 3, 3).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let make = || {
            let s = ParamStore::new(DType::F32, 9);
            s.root().conv2d("c", 3, 4, 3).unwrap();
            s.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&store.root().sub("bn"), 1).unwrap();
        let x = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 2))
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let rm = scalar(&store.get("bn.running_mean").unwrap()).unwrap();
        assert!((rm - 0.25).abs() < 1e-12);
    }
}
