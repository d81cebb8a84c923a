//! Central finite-difference gradient checks for 64-bit graphs.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::scalar;

/// Relative error of one variable's analytic gradient.
#[derive(Clone, Debug)]
pub struct GradError {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; 0 when both vanish.
    pub rel: f64,
    pub numeric_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compare backprop gradients of the scalar `f()` against central differences
/// with step `eps`, perturbing each variable in `vars` one element at a time.
pub fn check(vars: &[(&str, &Var)], f: impl Fn() -> Result<Tensor>, eps: f64) -> Result<Vec<GradError>> {
    let loss = f()?;
    if loss.elem_count() != 1 || loss.dtype() != DType::F64 {
        return Err(Error::Invalid("gradient check needs a scalar f64 objective".into()));
    }
    let grads = loss.backward()?;
    let mut out = Vec::with_capacity(vars.len());
    for &(name, var) in vars {
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; original.len()],
        };
        let shape = var.shape().clone();
        let mut numeric = Vec::with_capacity(original.len());
        let mut probe = original.clone();
        for i in 0..original.len() {
            probe[i] = original[i] + eps;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let plus = scalar(&f()?)?;
            probe[i] = original[i] - eps;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let minus = scalar(&f()?)?;
            probe[i] = original[i];
            numeric.push((plus - minus) / (2.0 * eps));
        }
        var.set(&Tensor::from_vec(original, &shape, var.device())?)?;
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        out.push(GradError {
            name: name.to_string(),
            rel: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
            numeric_norm: norm(&numeric),
        });
    }
    Ok(out)
}
