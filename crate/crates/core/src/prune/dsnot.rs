//! Training-free mask refinement by grow/prune swaps.
//!
//! For one output row `w` with pruned set `P`, the reconstruction error over
//! the calibration activations is
//!
//! ```text
//! e(P) = ‖(w ⊙ m − w) Xᵀ‖² = Σ_{i,j ∈ P} w_i w_j G_ij,    G = Σ xᵀx
//! ```
//!
//! Swaps are proposed in Wanda-score order (regrow the best pruned weight,
//! prune the worst kept weight in the same comparison group) and committed
//! only when `e` strictly decreases.

use super::mask::{Mask, MaskPattern};
use super::stats::StatsMap;
use crate::error::{Error, Result};
use crate::model::{LayerId, WeightContainer};
use crate::tensor::Matrix;

pub const DEFAULT_MAX_CYCLES: usize = 50;

/// Exact reconstruction error of one row under `keep`, in f64.
pub fn row_recon_error(w: &[f32], keep: &[bool], gram: &Matrix) -> f64 {
    let pruned: Vec<usize> = (0..w.len()).filter(|&j| !keep[j]).collect();
    let mut e = 0.0f64;
    for &i in &pruned {
        for &j in &pruned {
            e += f64::from(w[i]) * f64::from(w[j]) * f64::from(gram.get(i, j));
        }
    }
    e
}

/// Outcome of refining one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowRefinement {
    pub proposals: usize,
    /// Error after each committed swap, starting with the initial error.
    pub errors: Vec<f64>,
}

/// Refines one row in place. `group` is the N:M group width, or `None` for an
/// unstructured row.
pub fn refine_row(
    w: &[f32],
    scores: &[f32],
    gram: &Matrix,
    keep: &mut [bool],
    group: Option<usize>,
    max_cycles: usize,
) -> RowRefinement {
    let cols = w.len();
    let wd: Vec<f64> = w.iter().map(|&v| f64::from(v)).collect();
    // u = G · (w restricted to the pruned set)
    let mut u = vec![0.0f64; cols];
    for j in (0..cols).filter(|&j| !keep[j]) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui += f64::from(gram.get(i, j)) * wd[j];
        }
    }
    let mut error: f64 = (0..cols).filter(|&i| !keep[i]).map(|i| wd[i] * u[i]).sum();
    let mut out = RowRefinement {
        proposals: 0,
        errors: vec![error],
    };

    let span = |j: usize| match group {
        Some(m) => (j / m * m)..(j / m * m + m),
        None => 0..cols,
    };
    loop {
        let mut grow: Vec<usize> = (0..cols).filter(|&j| !keep[j]).collect();
        grow.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut committed = false;
        for p in grow {
            if out.proposals >= max_cycles {
                return out;
            }
            if keep[p] {
                continue;
            }
            let Some(q) = span(p)
                .filter(|&j| keep[j])
                .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
            else {
                continue;
            };
            out.proposals += 1;
            let gpq = f64::from(gram.get(p, q));
            let delta = wd[p] * wd[p] * f64::from(gram.get(p, p))
                + wd[q] * wd[q] * f64::from(gram.get(q, q))
                - 2.0 * wd[p] * u[p]
                + 2.0 * wd[q] * u[q]
                - 2.0 * wd[p] * wd[q] * gpq;
            if delta < 0.0 {
                keep[p] = true;
                keep[q] = false;
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui += f64::from(gram.get(i, q)) * wd[q] - f64::from(gram.get(i, p)) * wd[p];
                }
                error += delta;
                out.errors.push(error);
                committed = true;
            }
        }
        if !committed {
            return out;
        }
    }
}

/// Refines every row of a layer's mask against the exact reconstruction error.
pub fn dsnot_refine(
    weights: &WeightContainer,
    layer: LayerId,
    stats: &StatsMap,
    mask: &Mask,
    max_cycles: usize,
) -> Result<Mask> {
    let s = stats
        .get(&layer)
        .ok_or_else(|| Error::MissingStats(layer.to_string()))?;
    let gram = s.gram()?;
    let w = weights.layer(layer);
    if mask.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "dsnot_refine",
            left: w.shape(),
            right: mask.shape(),
        });
    }
    let scores = super::score::wanda_scores(w, &s.channel_norms())?;
    let group = match mask.pattern() {
        MaskPattern::NM { m, .. } => Some(m),
        MaskPattern::Unstructured => None,
    };
    let mut out = mask.clone();
    for r in 0..w.rows() {
        refine_row(
            w.row(r),
            scores.row(r),
            gram,
            out.row_mut(r),
            group,
            max_cycles,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_gram(n: usize, rng: &mut RngStream) -> Matrix {
        let x = Matrix::from_fn(3 * n, n, |_, _| rng.normal(0.0, 1.0));
        crate::tensor::matmul_tn(&x, &x).unwrap()
    }

    #[test]
    fn delta_tracks_exact_error() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..50 {
            let n = 16;
            let g = random_gram(n, &mut rng);
            let w: Vec<f32> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            let scores: Vec<f32> = w.iter().map(|v| v.abs()).collect();
            let mut keep: Vec<bool> = (0..n).map(|j| j % 2 == 0).collect();
            let initial = row_recon_error(&w, &keep, &g);
            let res = refine_row(&w, &scores, &g, &mut keep, None, 200);
            assert_eq!(keep.iter().filter(|&&k| k).count(), n / 2);
            let exact = row_recon_error(&w, &keep, &g);
            assert!((res.errors[0] - initial).abs() < 1e-6 * initial.max(1.0));
            assert!((res.errors.last().unwrap() - exact).abs() < 1e-6 * exact.max(1.0));
            for pair in res.errors.windows(2) {
                assert!(pair[1] < pair[0]);
            }
        }
    }

    #[test]
    fn optimal_mask_is_unchanged() {
        // Identity gram: error is Σ w_j² over pruned, so the magnitude mask is optimal.
        let g = Matrix::identity(4);
        let w = [0.1f32, 2.0, -0.3, 4.0];
        let scores: Vec<f32> = w.iter().map(|v| v.abs()).collect();
        let mut keep = [false, true, false, true];
        let res = refine_row(&w, &scores, &g, &mut keep, Some(4), 50);
        assert_eq!(keep, [false, true, false, true]);
        assert_eq!(res.errors.len(), 1);
    }

    #[test]
    fn stops_at_max_cycles() {
        let mut rng = RngStream::new(9, 0);
        let g = random_gram(8, &mut rng);
        let w: Vec<f32> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let scores: Vec<f32> = w.iter().map(|v| v.abs()).collect();
        let mut keep = [true, true, true, true, false, false, false, false];
        let res = refine_row(&w, &scores, &g, &mut keep, None, 2);
        assert!(res.proposals <= 2);
    }

    #[test]
    fn group_restricts_swaps() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..30 {
            let g = random_gram(8, &mut rng);
            let w: Vec<f32> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
            let scores: Vec<f32> = w.iter().map(|v| v.abs()).collect();
            let mut keep = [true, true, false, false, false, true, false, true];
            refine_row(&w, &scores, &g, &mut keep, Some(4), 50);
            for grp in keep.chunks(4) {
                assert_eq!(grp.iter().filter(|&&k| k).count(), 2);
            }
        }
    }
}
