//! Adam training for the fixed decoder, with a hand-derived backward pass.
//!
//! Batches are uniform random windows over the BOS-joined corpus. The loss is
//! the mean next-token cross-entropy over every predicted position of the
//! batch.

use serde::{Deserialize, Serialize};

use crate::calib::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward_trace, gelu_grad, BlockTrace, LnCache, ModelConfig, WeightContainer};
use crate::rng::RngStream;
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_unchecked, Matrix};
use crate::tokenizer::TokenId;

pub const LOG_EVERY: usize = 50;
/// Standard deviation of freshly initialized matrices.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            seq_len: 128,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::invalid("batch_size must be >= 1 and seq_len >= 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be > 0"));
        }
        Ok(())
    }
}

/// Fresh weights with the trainer's initialization.
pub fn init_weights(cfg: ModelConfig, seed: u64) -> Result<WeightContainer> {
    WeightContainer::init_random(cfg, INIT_STD, &mut RngStream::new(seed, u64::MAX))
}

fn add_to(grads: &mut WeightContainer, name: &str, m: &Matrix) {
    grads.t_mut(name).add_assign(m);
}

/// Returns `dx` and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    grads: &mut WeightContainer,
    prefix: &str,
) -> Matrix {
    let (t, d) = dy.shape();
    let g = gain.data();
    let mut dgain = vec![0.0f32; d];
    let mut dbias = vec![0.0f32; d];
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0f32; d];
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f32>() / d as f32;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    grads
        .t_mut(&format!("{prefix}.gain"))
        .data_mut()
        .iter_mut()
        .zip(&dgain)
        .for_each(|(a, b)| *a += b);
    grads
        .t_mut(&format!("{prefix}.bias"))
        .data_mut()
        .iter_mut()
        .zip(&dbias)
        .for_each(|(a, b)| *a += b);
    dx
}

/// Backward through one block; `dx` is the gradient at the block output and
/// the return value the gradient at its input.
fn block_backward(
    w: &WeightContainer,
    b: usize,
    tr: &BlockTrace,
    dx: Matrix,
    grads: &mut WeightContainer,
) -> Result<Matrix> {
    let cfg = w.config();
    let name = |s: &str| format!("layers.{b}.{s}");

    // MLP branch.
    add_to(grads, &name("mlp_down"), &matmul_tn(&dx, &tr.g)?);
    let dg = matmul(&dx, w.t(&name("mlp_down")))?;
    let mut du = dg;
    for (d, &u) in du.data_mut().iter_mut().zip(tr.u.data()) {
        *d *= gelu_grad(u);
    }
    add_to(grads, &name("mlp_up"), &matmul_tn(&du, &tr.h2)?);
    let dh2 = matmul(&du, w.t(&name("mlp_up")))?;
    let mut dmid = layer_norm_backward(&dh2, &tr.ln2, w.t(&name("ln2.gain")), grads, &name("ln2"));
    dmid.add_assign(&dx);

    // Attention branch.
    add_to(grads, &name("attn_o"), &matmul_tn(&dmid, &tr.att)?);
    let datt = matmul(&dmid, w.t(&name("attn_o")))?;
    let (t, d) = datt.shape();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for h in 0..cfg.n_heads {
        let p = &tr.probs[h];
        let dout = datt.columns(h * dh, dh);
        let qh = tr.q.columns(h * dh, dh);
        let kh = tr.k.columns(h * dh, dh);
        let vh = tr.v.columns(h * dh, dh);
        dv.set_columns(h * dh, &matmul_tn(p, &dout)?);
        let dp = matmul_nt(&dout, &vh)?;
        let mut ds = Matrix::zeros(t, t);
        for i in 0..t {
            let pr = &p.row(i)[..=i];
            let dpr = &dp.row(i)[..=i];
            let inner: f32 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            let out = ds.row_mut(i);
            for j in 0..=i {
                out[j] = scale * pr[j] * (dpr[j] - inner);
            }
        }
        dq.set_columns(h * dh, &matmul(&ds, &kh)?);
        dk.set_columns(h * dh, &matmul_tn(&ds, &qh)?);
    }
    add_to(grads, &name("attn_q"), &matmul_tn(&dq, &tr.h1)?);
    add_to(grads, &name("attn_k"), &matmul_tn(&dk, &tr.h1)?);
    add_to(grads, &name("attn_v"), &matmul_tn(&dv, &tr.h1)?);
    let mut dh1 = matmul(&dq, w.t(&name("attn_q")))?;
    dh1.add_assign(&matmul(&dk, w.t(&name("attn_k")))?);
    dh1.add_assign(&matmul(&dv, w.t(&name("attn_v")))?);
    let mut din = layer_norm_backward(&dh1, &tr.ln1, w.t(&name("ln1.gain")), grads, &name("ln1"));
    din.add_assign(&dmid);
    Ok(din)
}

/// Mean next-token cross-entropy over the batch and its exact gradient with
/// respect to every tensor.
pub fn loss_and_grads(
    w: &WeightContainer,
    batch: &[Vec<TokenId>],
) -> Result<(f32, WeightContainer)> {
    let cfg = *w.config();
    let Some(first) = batch.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let seq_len = first.len();
    if seq_len < 2 {
        return Err(Error::SequenceTooShort {
            need: 2,
            got: seq_len,
        });
    }
    if let Some(bad) = batch.iter().find(|s| s.len() != seq_len) {
        return Err(Error::invalid(format!(
            "batch sequences must share one length: {} vs {seq_len}",
            bad.len()
        )));
    }
    let denom = (batch.len() * (seq_len - 1)) as f64;
    let mut grads = WeightContainer::zeros(cfg)?;
    let mut loss = 0.0f64;

    for seq in batch {
        let (logits, trace) = forward_trace(w, seq)?;
        let mut dlogits = Matrix::zeros(seq_len, cfg.vocab_size);
        for i in 0..seq_len - 1 {
            let row = logits.row(i);
            let lp = crate::tensor::log_softmax_f64(row);
            let target = seq[i + 1] as usize;
            loss -= lp[target];
            let probs = softmax_unchecked(row, 1.0);
            let out = dlogits.row_mut(i);
            for (o, p) in out.iter_mut().zip(&probs) {
                *o = (f64::from(*p) / denom) as f32;
            }
            out[target] -= (1.0 / denom) as f32;
        }
        add_to(&mut grads, "unembed", &matmul_tn(&dlogits, &trace.hf)?);
        let dhf = matmul(&dlogits, w.t("unembed"))?;
        let mut dx = layer_norm_backward(&dhf, &trace.lnf, w.t("ln_f.gain"), &mut grads, "ln_f");
        for b in (0..cfg.n_layers).rev() {
            dx = block_backward(w, b, &trace.blocks[b], dx, &mut grads)?;
        }
        let tok = grads.t_mut("tok_emb");
        for (i, &id) in seq.iter().enumerate() {
            let r = tok.row_mut(id as usize);
            for (a, b) in r.iter_mut().zip(dx.row(i)) {
                *a += b;
            }
        }
        let pos = grads.t_mut("pos_emb");
        for i in 0..seq_len {
            let r = pos.row_mut(i);
            for (a, b) in r.iter_mut().zip(dx.row(i)) {
                *a += b;
            }
        }
    }
    Ok(((loss / denom) as f32, grads))
}

/// First and second moment estimates for every tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u32,
    m: WeightContainer,
    v: WeightContainer,
}

impl AdamState {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Ok(AdamState {
            step: 0,
            m: WeightContainer::zeros(cfg)?,
            v: WeightContainer::zeros(cfg)?,
        })
    }

    pub fn step(&mut self, w: &mut WeightContainer, grads: &WeightContainer, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = w.tensors().keys().cloned().collect();
        for name in names {
            let g = grads.t(&name).data();
            let m = self.m.t_mut(&name).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.t_mut(&name).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (self.m.t(&name).data(), self.v.t(&name).data());
            let p = w.t_mut(&name).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// `batch_size` uniform windows of `seq_len` tokens.
pub fn sample_batch(
    tokens: &[TokenId],
    batch_size: usize,
    seq_len: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<TokenId>>> {
    if tokens.len() < seq_len {
        return Err(Error::NoLongDocument { need: seq_len });
    }
    let starts = tokens.len() - seq_len + 1;
    Ok((0..batch_size)
        .map(|_| {
            let s = rng.below(starts);
            tokens[s..s + seq_len].to_vec()
        })
        .collect())
}

/// Trains and returns the final weights with the loss of every step.
pub fn train_with_history(
    weights: &WeightContainer,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(WeightContainer, Vec<f32>)> {
    cfg.validate()?;
    if cfg.seq_len > weights.config().max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: weights.config().max_seq_len,
        });
    }
    let tokens = corpus.concatenated();
    let mut w = weights.clone();
    let mut adam = AdamState::new(*w.config())?;
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(&tokens, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let (loss, grads) = loss_and_grads(&w, &batch).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                step,
                loss: f32::NAN,
            },
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut w, &grads, cfg);
        if step % LOG_EVERY == 0 || step + 1 == cfg.steps {
            log::info!("step {step:>5}  loss {loss:.4}");
        }
        history.push(loss);
    }
    Ok((w, history))
}

pub fn train(
    weights: &WeightContainer,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<WeightContainer> {
    train_with_history(weights, corpus, cfg).map(|(w, _)| w)
}
