use super::mask::PruneMask;
use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{forward_with_taps, LayerId, WeightContainer};
use crate::tensor::{matmul_nt, Matrix};

/// `Ŵ = W ⊙ keep` for each masked layer; everything else is copied.
pub fn apply_mask(weights: &WeightContainer, masks: &[PruneMask]) -> Result<WeightContainer> {
    let mut out = weights.clone();
    for pm in masks {
        let name = pm.layer.to_string();
        let w = weights.get(&name)?;
        if w.shape() != pm.mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "apply_mask",
                left: w.shape(),
                right: pm.mask.shape(),
            });
        }
        let target = out.t_mut(&name);
        for (v, &k) in target.data_mut().iter_mut().zip(pm.mask.keep()) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// `‖(W − Ŵ) Xᵀ‖_F` over the dense model's input activations of `layer` on
/// the calibration set.
pub fn layer_recon_error(
    dense: &WeightContainer,
    pruned: &WeightContainer,
    layer: LayerId,
    calib: &CalibrationSet,
) -> Result<f32> {
    if dense.config() != pruned.config() {
        return Err(Error::invalid(
            "dense and pruned models have different configs",
        ));
    }
    let diff = dense.layer(layer).sub(pruned.layer(layer))?;
    let max = dense.config().max_seq_len;
    let mut sq = 0.0f64;
    for seq in &calib.sequences {
        for chunk in seq.chunks(max) {
            let (_, taps) = forward_with_taps(dense, chunk, &[layer])?;
            sq += recon_sq(&diff, &taps[0].captured)?;
        }
    }
    Ok(sq.sqrt() as f32)
}

fn recon_sq(diff: &Matrix, x: &Matrix) -> Result<f64> {
    let e = matmul_nt(diff, x)?;
    Ok(e.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum())
}
