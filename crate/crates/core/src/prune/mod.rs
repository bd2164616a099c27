//! Activation statistics, importance scores, masks, OWL allocation, DSnoT
//! refinement and mask application.
//!
//! Activations are always tapped from the dense model in one pass; pruning a
//! layer never re-propagates before the next layer is scored.

mod apply;
mod dsnot;
mod mask;
mod owl;
mod score;
mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use apply::{apply_mask, layer_recon_error};
pub use dsnot::{dsnot_refine, refine_row, row_recon_error, RowRefinement, DEFAULT_MAX_CYCLES};
pub use mask::{
    build_mask_nm, build_mask_unstructured, load_masks, rle_decode, rle_encode, save_masks,
    ComparisonGroup, Mask, MaskPattern, PruneMask,
};
pub use owl::{outlier_ratio, owl_allocate, owl_plan, OwlParams, PlanPattern, SparsityPlan};
pub use score::{magnitude_scores, score_magnitude, score_wanda, wanda_scores};
pub use stats::{collect_stats, collect_stats_for, ActivationStats, StatsMap};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::WeightContainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Magnitude,
    Wanda,
    WandaDsnot,
}

impl Method {
    pub fn needs_stats(self) -> bool {
        !matches!(self, Method::Magnitude)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Method::Magnitude),
            "wanda" => Ok(Method::Wanda),
            "wanda_dsnot" | "dsnot" => Ok(Method::WandaDsnot),
            _ => Err(Error::invalid(format!("unknown pruning method `{s}`"))),
        }
    }
}

/// A sparsity setting: an unstructured ratio or an N:M pattern. Written as
/// `"0.5"` or `"2:4"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sparsity {
    Unstructured(f64),
    NM { n: usize, m: usize },
}

impl fmt::Display for Sparsity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sparsity::Unstructured(r) => write!(f, "{r}"),
            Sparsity::NM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for Sparsity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains(':') {
            match s.parse::<MaskPattern>()? {
                MaskPattern::NM { n, m } => Ok(Sparsity::NM { n, m }),
                MaskPattern::Unstructured => unreachable!(),
            }
        } else {
            let r: f64 = s
                .parse()
                .map_err(|_| Error::invalid(format!("bad sparsity `{s}`")))?;
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!(
                    "sparsity ratio must be in [0, 1), got {r}"
                )));
            }
            Ok(Sparsity::Unstructured(r))
        }
    }
}

impl Serialize for Sparsity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Sparsity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSpec {
    pub method: Method,
    pub sparsity: Sparsity,
    /// Applied to unstructured settings only.
    pub owl: Option<OwlParams>,
    pub group: ComparisonGroup,
    pub dsnot_max_cycles: usize,
}

impl PruneSpec {
    pub fn new(method: Method, sparsity: Sparsity) -> Self {
        PruneSpec {
            method,
            sparsity,
            owl: None,
            group: ComparisonGroup::PerRow,
            dsnot_max_cycles: DEFAULT_MAX_CYCLES,
        }
    }

    pub fn needs_stats(&self) -> bool {
        self.method.needs_stats() || self.owl.is_some()
    }

    pub fn needs_gram(&self) -> bool {
        self.method == Method::WandaDsnot
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub weights: WeightContainer,
    pub masks: Vec<PruneMask>,
    pub plan: SparsityPlan,
}

/// Collects whatever statistics `spec` needs from `calib`, then prunes.
pub fn prune_model(
    weights: &WeightContainer,
    calib: &CalibrationSet,
    spec: &PruneSpec,
) -> Result<PruneOutcome> {
    let stats = if spec.needs_stats() {
        Some(collect_stats(weights, calib, spec.needs_gram())?)
    } else {
        None
    };
    prune_with_stats(weights, stats.as_ref(), spec)
}

/// Prunes every prunable layer with precomputed statistics.
pub fn prune_with_stats(
    weights: &WeightContainer,
    stats: Option<&StatsMap>,
    spec: &PruneSpec,
) -> Result<PruneOutcome> {
    let cfg = *weights.config();
    let need = || Error::invalid("this pruning spec needs activation statistics");
    let plan = match spec.sparsity {
        Sparsity::Unstructured(ratio) => match spec.owl {
            Some(params) => owl_plan(stats.ok_or_else(need)?, weights, ratio, params)?,
            None => SparsityPlan::uniform(&cfg, ratio)?,
        },
        Sparsity::NM { n, m } => SparsityPlan::semi_structured(n, m)?,
    };

    let mut masks = Vec::new();
    for layer in cfg.prunable_layers() {
        let scores = match spec.method {
            Method::Magnitude => score_magnitude(weights, layer),
            Method::Wanda | Method::WandaDsnot => {
                score_wanda(weights, layer, stats.ok_or_else(need)?)?
            }
        };
        let mut mask = match plan.pattern {
            PlanPattern::Unstructured => {
                build_mask_unstructured(&scores, plan.per_layer_ratio[&layer], spec.group)?
            }
            PlanPattern::SemiStructured { n, m } => build_mask_nm(&scores, n, m)?,
        };
        if spec.method == Method::WandaDsnot {
            mask = dsnot_refine(
                weights,
                layer,
                stats.ok_or_else(need)?,
                &mask,
                spec.dsnot_max_cycles,
            )?;
        }
        masks.push(PruneMask { layer, mask });
    }
    let pruned = apply_mask(weights, &masks)?;
    Ok(PruneOutcome {
        weights: pruned,
        masks,
        plan,
    })
}
