//! Synthetic scribbles: seeded, 1-px random-walk strokes inside each connected
//! component of the foreground (manipulated) and background (authentic) regions.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Label, TriStateMask};
use crate::error::{Error, Result};

const DIRS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
/// Probability of continuing in the current direction.
const MOMENTUM: f64 = 0.8;

/// Draw scribbles covering `round(coverage * area)` pixels of each class.
///
/// Manipulated strokes stay inside the mask foreground and authentic strokes inside
/// the background. Identical `(mask, coverage, seed)` give identical output.
pub fn synthesize_scribble(
    dense_mask: &Array2<bool>,
    coverage: f64,
    seed: u64,
) -> Result<TriStateMask> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Invalid(format!(
            "scribble coverage must lie in (0, 1], got {coverage}"
        )));
    }
    if !dense_mask.iter().any(|&v| v) {
        return Err(Error::Empty("dense mask has no foreground pixel".into()));
    }
    let (h, w) = dense_mask.dim();
    let mut out = TriStateMask::unlabeled(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, label) in [(true, Label::Manipulated), (false, Label::Authentic)] {
        let region = dense_mask.mapv(|v| v == class);
        let area = region.iter().filter(|&&v| v).count();
        let target = (coverage * area as f64).round() as usize;
        if target == 0 {
            continue;
        }
        let components = components(&region);
        let quotas = apportion(&components, target);
        for (comp, quota) in components.iter().zip(quotas) {
            for (r, c) in walk(comp, &region, quota, &mut rng) {
                out.set(r, c, label);
            }
        }
    }
    Ok(out)
}

/// 4-connected components in raster order of their first pixel.
fn components(region: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = region.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !region[[r, c]] || seen[[r, c]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[[r, c]] = true;
            while let Some(p) = queue.pop_front() {
                comp.push(p);
                for n in neighbors(p, h, w) {
                    if region[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps
}

fn neighbors((r, c): (usize, usize), h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    DIRS.iter().filter_map(move |&(dr, dc)| step((r, c), (dr, dc), h, w))
}

fn step((r, c): (usize, usize), (dr, dc): (isize, isize), h: usize, w: usize) -> Option<(usize, usize)> {
    let nr = r.checked_add_signed(dr)?;
    let nc = c.checked_add_signed(dc)?;
    (nr < h && nc < w).then_some((nr, nc))
}

/// Split `target` across components proportionally to their area (largest remainder).
fn apportion(comps: &[Vec<(usize, usize)>], target: usize) -> Vec<usize> {
    let total: usize = comps.iter().map(Vec::len).sum();
    let exact: Vec<f64> = comps
        .iter()
        .map(|c| target as f64 * c.len() as f64 / total as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = target - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        if quotas[i] < comps[i].len() {
            quotas[i] += 1;
            rest -= 1;
        }
    }
    quotas
}

fn walk(
    comp: &[(usize, usize)],
    region: &Array2<bool>,
    quota: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if quota == 0 {
        return Vec::new();
    }
    let (h, w) = region.dim();
    let interior: Vec<(usize, usize)> = comp
        .iter()
        .copied()
        .filter(|&p| {
            DIRS.iter()
                .all(|&d| step(p, d, h, w).is_some_and(|n| region[n]))
        })
        .collect();
    let starts = if interior.is_empty() { comp } else { &interior };
    let mut cur = starts[rng.random_range(0..starts.len())];

    let mut visited = Array2::from_elem((h, w), false);
    let mut path = vec![cur];
    visited[cur] = true;
    let mut dir = DIRS[rng.random_range(0..4)];
    let max_steps = 50 * comp.len() + 1000;
    let mut steps = 0;
    while path.len() < quota && steps < max_steps {
        steps += 1;
        if !rng.random_bool(MOMENTUM) {
            dir = DIRS[rng.random_range(0..4)];
        }
        let next = match step(cur, dir, h, w).filter(|&n| region[n]) {
            Some(n) => n,
            None => {
                let options: Vec<_> = DIRS
                    .iter()
                    .filter(|&&d| step(cur, d, h, w).is_some_and(|n| region[n]))
                    .copied()
                    .collect();
                if options.is_empty() {
                    break;
                }
                dir = options[rng.random_range(0..options.len())];
                step(cur, dir, h, w).expect("checked above")
            }
        };
        cur = next;
        if !visited[cur] {
            visited[cur] = true;
            path.push(cur);
        }
    }
    // Walk budget exhausted: grow the stroke breadth-first from what was drawn.
    if path.len() < quota {
        let mut queue: VecDeque<_> = path.iter().copied().collect();
        while let Some(p) = queue.pop_front() {
            if path.len() >= quota {
                break;
            }
            for n in neighbors(p, h, w) {
                if region[n] && !visited[n] && path.len() < quota {
                    visited[n] = true;
                    path.push(n);
                    queue.push_back(n);
                }
            }
        }
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn square_mask() -> Array2<bool> {
        let mut m = Array2::from_elem((64, 64), false);
        m.slice_mut(s![24..40, 24..40]).fill(true);
        m
    }

    #[test]
    fn full_foreground_full_coverage() {
        let m = Array2::from_elem((7, 5), true);
        let s = synthesize_scribble(&m, 1.0, 3).unwrap();
        assert_eq!(s.count(Label::Manipulated), 35);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = square_mask();
        let a = synthesize_scribble(&m, 0.1, 11).unwrap();
        let b = synthesize_scribble(&m, 0.1, 11).unwrap();
        assert_eq!(a, b);
        let c = synthesize_scribble(&m, 0.1, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn centered_square_count_and_containment() {
        let m = square_mask();
        let s = synthesize_scribble(&m, 0.1, 5).unwrap();
        let mut inside = 0;
        for r in 0..64 {
            for c in 0..64 {
                match s.get(r, c) {
                    Label::Manipulated => {
                        assert!((24..40).contains(&r) && (24..40).contains(&c));
                        inside += 1;
                    }
                    Label::Authentic => assert!(!m[[r, c]]),
                    Label::Unlabeled => {}
                }
            }
        }
        assert!((25..=26).contains(&inside), "{inside}");
        assert_eq!(s.count(Label::Authentic), 384);
    }

    #[test]
    fn multiple_components_all_receive_strokes() {
        let mut m = Array2::from_elem((32, 32), false);
        m.slice_mut(s![2..10, 2..10]).fill(true);
        m.slice_mut(s![20..30, 20..30]).fill(true);
        let s = synthesize_scribble(&m, 0.2, 0).unwrap();
        let first = (2..10)
            .flat_map(|r| (2..10).map(move |c| (r, c)))
            .filter(|&(r, c)| s.get(r, c) == Label::Manipulated)
            .count();
        let total = s.count(Label::Manipulated);
        assert_eq!(total, 33); // round(0.2 * 164)
        assert!(first > 0 && first < total);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = square_mask();
        assert!(synthesize_scribble(&m, 0.0, 0).is_err());
        assert!(synthesize_scribble(&m, 1.5, 0).is_err());
        assert!(synthesize_scribble(&Array2::from_elem((4, 4), false), 0.5, 0).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn strokes_never_leave_their_region(
            cells in proptest::collection::vec(proptest::bool::weighted(0.4), 20 * 24),
            cov in 0.01f64..=1.0,
            seed in 0u64..1000,
        ) {
            let m = Array2::from_shape_vec((20, 24), cells).unwrap();
            proptest::prop_assume!(m.iter().any(|&v| v));
            let s = synthesize_scribble(&m, cov, seed).unwrap();
            for ((r, c), l) in s.iter() {
                match l {
                    Label::Manipulated => proptest::prop_assert!(m[[r, c]]),
                    Label::Authentic => proptest::prop_assert!(!m[[r, c]]),
                    Label::Unlabeled => {}
                }
            }
            let fg = m.iter().filter(|&&v| v).count();
            let target = (cov * fg as f64).round() as i64;
            proptest::prop_assert!((s.count(Label::Manipulated) as i64 - target).abs() <= 1);
        }
    }
}
