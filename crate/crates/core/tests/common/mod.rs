#![allow(dead_code)]

pub mod reference;

use calibprune::trainer::loss_and_grads;
use calibprune::{Matrix, ModelConfig, RngStream, TokenId, WeightContainer};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
pub const ABS_TOL: f64 = 1e-4;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
    }
}

/// Random micro-model with non-trivial layer-norm parameters.
pub fn micro_model(seed: u64) -> WeightContainer {
    let cfg = micro_config();
    let mut rng = RngStream::new(seed, 0);
    let mut w = WeightContainer::init_random(cfg, 0.5, &mut rng).unwrap();
    let names: Vec<String> = w.tensors().keys().cloned().collect();
    for name in names {
        let (r, c) = w.get(&name).unwrap().shape();
        if name.ends_with(".gain") {
            w.set(
                &name,
                Matrix::from_fn(r, c, |_, _| 1.0 + rng.normal(0.0, 0.3)),
            )
            .unwrap();
        } else if name.ends_with(".bias") {
            w.set(&name, Matrix::from_fn(r, c, |_, _| rng.normal(0.0, 0.2)))
                .unwrap();
        }
    }
    w
}

pub fn micro_batch(seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = RngStream::new(seed, 1);
    (0..2)
        .map(|_| (0..8).map(|_| rng.below(16) as TokenId).collect())
        .collect()
}

#[derive(Debug)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares every analytic gradient component with a central difference of
/// the f64 reference loss. Returns the number of components checked and the
/// mismatches.
pub fn gradient_check(w: &WeightContainer, batch: &[Vec<TokenId>]) -> (usize, Vec<GradMismatch>) {
    let cfg = *w.config();
    let (_, grads) = loss_and_grads(w, batch).unwrap();
    let mut params = reference::to_f64(w);
    let mut checked = 0;
    let mut bad = Vec::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        for i in 0..params[&name].len() {
            let orig = params[&name][i];
            params.get_mut(&name).unwrap()[i] = orig + FD_STEP;
            let up = reference::loss(&params, &cfg, batch);
            params.get_mut(&name).unwrap()[i] = orig - FD_STEP;
            let down = reference::loss(&params, &cfg, batch);
            params.get_mut(&name).unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = f64::from(grads.get(&name).unwrap().data()[i]);
            let diff = (analytic - numeric).abs();
            checked += 1;
            if diff > ABS_TOL && diff > REL_TOL * analytic.abs().max(numeric.abs()) {
                bad.push(GradMismatch {
                    tensor: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}
