//! Semantic-level bank and similarity-based suppression.

use crate::error::{Error, Result};

/// Unit-norm image descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBank {
    dim: usize,
    entries: Vec<f32>,
}

impl SemanticBank {
    /// Wrap rows that are already unit-norm (e.g. read back from disk).
    pub fn from_unit_rows(dim: usize, entries: Vec<f32>) -> Result<Self> {
        if dim == 0 || entries.is_empty() || entries.len() % dim != 0 {
            return Err(Error::Empty("semantic bank needs at least one descriptor".into()));
        }
        for (i, row) in entries.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!("semantic entry {i} has norm {n}")));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f32]> {
        self.entries.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.entries
    }

    /// Largest cosine similarity between `q` and any entry; `None` for a zero `q`.
    pub fn max_cosine(&self, q: &[f32]) -> Option<f32> {
        let qn = norm(q);
        if qn == 0.0 {
            return None;
        }
        self.entries()
            .map(|v| dot(q, v) / (qn * norm(v)))
            .reduce(f32::max)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// L2-normalize each descriptor. A zero descriptor is an error naming its index.
pub fn build_semantic_bank(descriptors: &[Vec<f32>]) -> Result<SemanticBank> {
    let dim = descriptors
        .first()
        .ok_or_else(|| Error::Empty("semantic bank needs at least one descriptor".into()))?
        .len();
    let mut entries = Vec::with_capacity(descriptors.len() * dim);
    for (index, v) in descriptors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "descriptor {index} has length {}, expected {dim}",
                v.len()
            )));
        }
        let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { index });
        }
        entries.extend(v.iter().map(|&x| (x as f64 / n) as f32));
    }
    Ok(SemanticBank { dim, entries })
}

/// `1 - max_m cos(q, v_m)`; 1 for a zero `q` (no evidence, no suppression).
pub fn suppression_factor(q: &[f32], bank: &SemanticBank) -> f32 {
    bank.max_cosine(q).map_or(1.0, |c| 1.0 - c)
}

/// Scale `q` by its suppression factor. Zero vectors pass through unchanged.
pub fn suppress(q: &[f32], bank: &SemanticBank) -> Vec<f32> {
    let f = suppression_factor(q, bank);
    q.iter().map(|&x| f * x).collect()
}
