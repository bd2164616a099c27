use super::stats::StatsMap;
use crate::error::{Error, Result};
use crate::model::{LayerId, WeightContainer};
use crate::tensor::Matrix;

/// `|W_ij|`.
pub fn magnitude_scores(w: &Matrix) -> Matrix {
    w.map(f32::abs)
}

/// `|W_ij| · ‖X_j‖₂`.
pub fn wanda_scores(w: &Matrix, channel_norms: &[f32]) -> Result<Matrix> {
    if channel_norms.len() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "wanda_scores",
            left: w.shape(),
            right: (1, channel_norms.len()),
        });
    }
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        w.get(i, j).abs() * channel_norms[j]
    }))
}

pub fn score_magnitude(weights: &WeightContainer, layer: LayerId) -> Matrix {
    magnitude_scores(weights.layer(layer))
}

pub fn score_wanda(weights: &WeightContainer, layer: LayerId, stats: &StatsMap) -> Result<Matrix> {
    let s = stats
        .get(&layer)
        .ok_or_else(|| Error::MissingStats(layer.to_string()))?;
    wanda_scores(weights.layer(layer), &s.channel_norms())
}
