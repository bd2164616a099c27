//! Outlier-weighted layer-wise sparsity: blocks whose Wanda scores contain
//! more outliers get a lower sparsity, while the parameter-weighted mean
//! stays at the global target.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::score::score_wanda;
use super::stats::StatsMap;
use crate::error::{Error, Result};
use crate::model::{LayerId, ModelConfig, WeightContainer};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwlParams {
    /// Half-width of the allowed sparsity band around the target.
    pub lambda: f64,
    /// A score is an outlier when it exceeds `m_mult` times its matrix mean.
    pub m_mult: f64,
}

impl Default for OwlParams {
    fn default() -> Self {
        OwlParams {
            lambda: 0.08,
            m_mult: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanPattern {
    Unstructured,
    SemiStructured { n: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub pattern: PlanPattern,
    pub global_target: f64,
    /// Unstructured plans only.
    pub per_layer_ratio: BTreeMap<LayerId, f64>,
}

impl SparsityPlan {
    pub fn uniform(cfg: &ModelConfig, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::invalid(format!(
                "sparsity ratio must be in [0, 1), got {ratio}"
            )));
        }
        Ok(SparsityPlan {
            pattern: PlanPattern::Unstructured,
            global_target: ratio,
            per_layer_ratio: cfg
                .prunable_layers()
                .into_iter()
                .map(|l| (l, ratio))
                .collect(),
        })
    }

    pub fn semi_structured(n: usize, m: usize) -> Result<Self> {
        if n >= m {
            return Err(Error::invalid(format!("N:M needs N < M, got {n}:{m}")));
        }
        Ok(SparsityPlan {
            pattern: PlanPattern::SemiStructured { n, m },
            global_target: 1.0 - n as f64 / m as f64,
            per_layer_ratio: BTreeMap::new(),
        })
    }

    /// Mean of per-layer ratios weighted by parameter count.
    pub fn weighted_mean(&self, cfg: &ModelConfig) -> f64 {
        match self.pattern {
            PlanPattern::SemiStructured { .. } => self.global_target,
            PlanPattern::Unstructured => {
                let (mut num, mut den) = (0.0, 0.0);
                for (layer, &r) in &self.per_layer_ratio {
                    let (o, i) = layer.kind.shape(cfg);
                    num += r * (o * i) as f64;
                    den += (o * i) as f64;
                }
                num / den
            }
        }
    }
}

/// Fraction of entries exceeding `m_mult × mean`.
pub fn outlier_ratio(scores: &Matrix, m_mult: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mean = scores.data().iter().map(|&v| f64::from(v)).sum::<f64>() / scores.len() as f64;
    let thresh = m_mult * mean;
    scores
        .data()
        .iter()
        .filter(|&&v| f64::from(v) > thresh)
        .count() as f64
        / scores.len() as f64
}

/// Maps block outlier ratios to block sparsities in `[S − λ, S + λ]`,
/// decreasing in the ratio, then shifts them so the size-weighted mean is
/// exactly `target`, clamping to the band and re-solving for the free blocks.
pub fn owl_allocate(
    outlier_ratios: &[f64],
    block_sizes: &[usize],
    target: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if outlier_ratios.len() != block_sizes.len() || outlier_ratios.is_empty() {
        return Err(Error::invalid(
            "one outlier ratio and size per block required",
        ));
    }
    if !(target > 0.0 && target < 1.0)
        || !(lambda >= 0.0)
        || target - lambda < 0.0
        || target + lambda >= 1.0
    {
        return Err(Error::InfeasibleBounds(format!(
            "target {target}, lambda {lambda}"
        )));
    }
    let lo = target - lambda;
    let hi = target + lambda;
    let dmax = outlier_ratios.iter().copied().fold(f64::MIN, f64::max);
    let dmin = outlier_ratios.iter().copied().fold(f64::MAX, f64::min);
    if dmax == dmin || lambda == 0.0 {
        return Ok(vec![target; outlier_ratios.len()]);
    }
    let base: Vec<f64> = outlier_ratios
        .iter()
        .map(|d| hi - (d - dmin) / (dmax - dmin) * (hi - lo))
        .collect();
    let sizes: Vec<f64> = block_sizes.iter().map(|&s| s as f64).collect();
    let total: f64 = sizes.iter().sum();

    // Solve Σ w·clamp(base + shift) = target·Σ w; clamping only ever happens
    // on the side the shift moves towards, so the free set shrinks monotonically.
    let mut clamped: Vec<Option<f64>> = vec![None; base.len()];
    let mut out = base.clone();
    loop {
        let fixed: f64 = clamped
            .iter()
            .zip(&sizes)
            .filter_map(|(c, w)| c.map(|v| v * w))
            .sum();
        let (free_w, free_sum) = base
            .iter()
            .zip(&sizes)
            .zip(&clamped)
            .filter(|(_, c)| c.is_none())
            .fold((0.0, 0.0), |(fw, fs), ((b, w), _)| (fw + w, fs + b * w));
        if free_w == 0.0 {
            break;
        }
        let shift = (target * total - fixed - free_sum) / free_w;
        let mut changed = false;
        for i in 0..base.len() {
            if clamped[i].is_some() {
                continue;
            }
            let v = base[i] + shift;
            if v > hi {
                clamped[i] = Some(hi);
                changed = true;
            } else if v < lo {
                clamped[i] = Some(lo);
                changed = true;
            }
            out[i] = v;
        }
        if !changed {
            break;
        }
    }
    for (o, c) in out.iter_mut().zip(&clamped) {
        if let Some(v) = c {
            *o = *v;
        }
    }
    Ok(out)
}

/// Block-level OWL plan from Wanda-score outlier ratios; every layer in a
/// block shares the block's sparsity.
pub fn owl_plan(
    stats: &StatsMap,
    weights: &WeightContainer,
    target: f64,
    params: OwlParams,
) -> Result<SparsityPlan> {
    let cfg = *weights.config();
    let layers = cfg.prunable_layers();
    let mut ratios = vec![0.0; cfg.n_layers];
    let mut sizes = vec![0usize; cfg.n_layers];
    let mut counts = vec![0usize; cfg.n_layers];
    for &layer in &layers {
        let scores = score_wanda(weights, layer, stats)?;
        ratios[layer.block] += outlier_ratio(&scores, params.m_mult);
        counts[layer.block] += 1;
        sizes[layer.block] += scores.len();
    }
    for (r, c) in ratios.iter_mut().zip(&counts) {
        *r /= *c as f64;
    }
    let block = owl_allocate(&ratios, &sizes, target, params.lambda)?;
    Ok(SparsityPlan {
        pattern: PlanPattern::Unstructured,
        global_target: target,
        per_layer_ratio: layers.into_iter().map(|l| (l, block[l.block])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_block_example() {
        let s = owl_allocate(&[0.1, 0.3], &[10, 10], 0.6, 0.1).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(
            owl_allocate(&[0.1, 0.3], &[5, 9], 0.5, 0.0).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            owl_allocate(&[0.2, 0.2, 0.2], &[5, 9, 1], 0.5, 0.1).unwrap(),
            vec![0.5; 3]
        );
        assert!(owl_allocate(&[0.1], &[1], 0.05, 0.1).is_err());
        assert!(owl_allocate(&[0.1], &[1], 0.95, 0.1).is_err());
    }

    #[test]
    fn outlier_ratio_counts_above_threshold() {
        let m = Matrix::from_vec(
            1,
            10,
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0],
        )
        .unwrap();
        // mean 10.9, threshold 5x = 54.5
        assert_eq!(outlier_ratio(&m, 5.0), 0.1);
        assert_eq!(outlier_ratio(&Matrix::filled(3, 3, 2.0), 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn plan_properties(ratios in prop::collection::vec(0.0f64..0.2, 2..8),
                           sizes in prop::collection::vec(1usize..1000, 8),
                           target in 0.2f64..0.7, lambda in 0.0f64..0.2) {
            let sizes = &sizes[..ratios.len()];
            let s = owl_allocate(&ratios, sizes, target, lambda).unwrap();
            let total: f64 = sizes.iter().map(|&v| v as f64).sum();
            let mean: f64 = s.iter().zip(sizes).map(|(a, &w)| a * w as f64).sum::<f64>() / total;
            prop_assert!((mean - target).abs() < 1e-6);
            for i in 0..s.len() {
                prop_assert!(s[i] >= target - lambda - 1e-12 && s[i] <= target + lambda + 1e-12);
                for j in 0..s.len() {
                    if ratios[i] < ratios[j] {
                        prop_assert!(s[i] >= s[j] - 1e-12);
                    }
                }
            }
        }
    }
}
