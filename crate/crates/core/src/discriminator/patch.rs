//! Patch grids, neighbourhood fusion and the patch-level memory bank.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const UNIFORM_3X3: [[f32; 3]; 3] = [[1.0 / 9.0; 3]; 3];

/// Row-major grid of `h * w` patch descriptors, each `dim` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * dim {
            return Err(Error::Shape(format!(
                "patch grid {h}x{w}x{dim} needs {} values, got {}",
                h * w * dim,
                data.len()
            )));
        }
        Ok(Self { h, w, dim, data })
    }

    /// Grid view of one (C, h, w) feature map taken from batch item `b`.
    pub fn from_feature_map(t: &Tensor, b: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let data = t
            .get(b)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, data)
    }

    pub fn at(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.w + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Weighted sum of each patch and its eight neighbours (edge-replicate padding).
pub fn fuse_neighborhood(grid: &PatchGrid, weights: &[[f32; 3]; 3]) -> Result<PatchGrid> {
    let total: f64 = weights.iter().flatten().map(|&w| w as f64).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "neighbourhood weights must sum to 1, got {total}"
        )));
    }
    let (h, w, dim) = (grid.h, grid.w, grid.dim);
    let mut out = vec![0.0f32; h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let dst = &mut out[(r * w + c) * dim..(r * w + c + 1) * dim];
            for (dr, row) in weights.iter().enumerate() {
                let sr = (r + dr).saturating_sub(1).min(h - 1);
                for (dc, &wt) in row.iter().enumerate() {
                    let sc = (c + dc).saturating_sub(1).min(w - 1);
                    for (d, s) in dst.iter_mut().zip(grid.at(sr, sc)) {
                        *d += wt * s;
                    }
                }
            }
        }
    }
    PatchGrid::new(h, w, dim, out)
}

/// Pooled patch descriptors from many images, capped at `capacity` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBank {
    dim: usize,
    entries: Vec<f32>,
}

impl PatchBank {
    /// Keep all rows if they fit, else a seeded uniform subset (original order kept).
    pub fn from_entries(dim: usize, entries: Vec<f32>, capacity: usize, seed: u64) -> Result<Self> {
        if dim == 0 || entries.is_empty() || entries.len() % dim != 0 {
            return Err(Error::Empty(format!(
                "patch bank needs a nonempty multiple of {dim} values, got {}",
                entries.len()
            )));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite patch value at row {}", i / dim)));
        }
        let n = entries.len() / dim;
        if n <= capacity {
            return Ok(Self { dim, entries });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, n, capacity).into_vec();
        keep.sort_unstable();
        let mut kept = Vec::with_capacity(capacity * dim);
        for i in keep {
            kept.extend_from_slice(&entries[i * dim..(i + 1) * dim]);
        }
        Ok(Self { dim, entries: kept })
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

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f32]> {
        self.entries.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.entries
    }

    /// Distance to the nearest entry, accumulated with independent lanes.
    /// Agrees with [`score`] up to float reassociation.
    pub fn nearest_distance(&self, q: &[f32]) -> f32 {
        const LANES: usize = 8;
        let mut best = f32::INFINITY;
        for e in self.entries() {
            let mut acc = [0.0f32; LANES];
            let mut qc = q.chunks_exact(LANES);
            let mut ec = e.chunks_exact(LANES);
            for (qa, ea) in (&mut qc).zip(&mut ec) {
                for l in 0..LANES {
                    let d = qa[l] - ea[l];
                    acc[l] += d * d;
                }
            }
            let mut d2: f32 = acc.iter().sum();
            for (a, b) in qc.remainder().iter().zip(ec.remainder()) {
                d2 += (a - b) * (a - b);
            }
            if d2 < best {
                best = d2;
            }
        }
        best.sqrt()
    }
}

/// Fuse each image's grid with uniform 3×3 weights, pool every position, subsample.
pub fn build_patch_bank(grids: &[PatchGrid], capacity: usize, seed: u64) -> Result<PatchBank> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Empty("patch bank needs at least one image".into()))?;
    let mut entries = Vec::new();
    for g in grids {
        if g.dim != first.dim {
            return Err(Error::Shape(format!(
                "patch widths differ across images: {} vs {}",
                g.dim, first.dim
            )));
        }
        entries.extend(fuse_neighborhood(g, &UNIFORM_3X3)?.into_data());
    }
    PatchBank::from_entries(first.dim, entries, capacity, seed)
}

/// Euclidean distance from `q` to its nearest bank entry (sequential linear scan).
pub fn score(q: &[f32], bank: &PatchBank) -> f32 {
    let mut best = f32::INFINITY;
    for e in bank.entries() {
        let mut d2 = 0.0f32;
        for (a, b) in q.iter().zip(e) {
            d2 += (a - b) * (a - b);
        }
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grid(h: usize, w: usize, dim: usize, seed: u64) -> PatchGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        PatchGrid::new(h, w, dim, data).unwrap()
    }

    #[test]
    fn constant_field_is_a_fixed_point() {
        let g = PatchGrid::new(3, 4, 2, [0.5f32, -2.0].repeat(12)).unwrap();
        let weights = [[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]];
        let f = fuse_neighborhood(&g, &weights).unwrap();
        for row in f.rows() {
            assert!((row[0] - 0.5).abs() < 1e-6 && (row[1] + 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_cell_is_identity() {
        let g = PatchGrid::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let f = fuse_neighborhood(&g, &UNIFORM_3X3).unwrap();
        for (a, b) in f.at(0, 0).iter().zip(g.at(0, 0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_fusion_matches_double_loop() {
        let g = random_grid(4, 4, 3, 1);
        let f = fuse_neighborhood(&g, &UNIFORM_3X3).unwrap();
        for r in 0..4i64 {
            for c in 0..4i64 {
                for d in 0..3 {
                    let mut want = 0.0f64;
                    for dr in -1..=1i64 {
                        for dc in -1..=1i64 {
                            let sr = (r + dr).clamp(0, 3) as usize;
                            let sc = (c + dc).clamp(0, 3) as usize;
                            want += g.at(sr, sc)[d] as f64 / 9.0;
                        }
                    }
                    assert!((f.at(r as usize, c as usize)[d] as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn weights_must_sum_to_one() {
        let g = random_grid(2, 2, 1, 0);
        let bad = [[0.1; 3]; 3];
        assert!(fuse_neighborhood(&g, &bad).is_err());
    }

    #[test]
    fn bank_counts_positions() {
        let bank = build_patch_bank(&[random_grid(2, 2, 5, 0)], 100, 0).unwrap();
        assert_eq!(bank.len(), 4);
        assert!(build_patch_bank(&[], 10, 0).is_err());
    }

    #[test]
    fn subsampling_is_seeded_and_capped() {
        let grids = [random_grid(10, 10, 2, 3)];
        let a = build_patch_bank(&grids, 10, 42).unwrap();
        let b = build_patch_bank(&grids, 10, 42).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn bank_is_the_union_of_per_image_passes() {
        let grids: Vec<_> = (0..3).map(|s| random_grid(3, 2, 4, s)).collect();
        let bank = build_patch_bank(&grids, usize::MAX, 0).unwrap();
        let mut want = Vec::new();
        for g in &grids {
            want.extend(fuse_neighborhood(g, &UNIFORM_3X3).unwrap().into_data());
        }
        assert_eq!(bank.as_flat(), &want[..]);
    }

    #[test]
    fn score_identities() {
        let bank = PatchBank::from_entries(2, vec![0.0, 0.0], 10, 0).unwrap();
        assert_eq!(score(&[3.0, 4.0], &bank), 5.0);
        let bank = PatchBank::from_entries(2, vec![1.0, 2.0, 3.0, 4.0], 10, 0).unwrap();
        assert_eq!(score(&[3.0, 4.0], &bank), 0.0);
    }

    #[test]
    fn fast_distance_agrees_with_scan() {
        let g = random_grid(10, 5, 19, 9);
        let bank = PatchBank::from_entries(19, g.into_data(), 1000, 0).unwrap();
        let q = random_grid(1, 1, 19, 4);
        let a = score(q.at(0, 0), &bank);
        let b = bank.nearest_distance(q.at(0, 0));
        assert!((a - b).abs() <= 1e-5 * a.max(1.0));
    }
}
