use super::{LayerId, LinearKind, ModelConfig, WeightContainer, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_f64, matmul, matmul_nt, Matrix};
use crate::tokenizer::TokenId;

/// Input activations of one linear layer for one forward pass, `tokens × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap {
    pub layer: LayerId,
    pub captured: Matrix,
}

pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub rstd: Vec<f32>,
}

/// Intermediates of one block, kept for taps and the backward pass.
pub(crate) struct BlockTrace {
    pub ln1: LnCache,
    pub h1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub att: Matrix,
    pub ln2: LnCache,
    pub h2: Matrix,
    pub u: Matrix,
    pub g: Matrix,
}

impl BlockTrace {
    /// The activation matrix that the given projection multiplies.
    pub fn input_of(&self, kind: LinearKind) -> &Matrix {
        match kind {
            LinearKind::AttnQ | LinearKind::AttnK | LinearKind::AttnV => &self.h1,
            LinearKind::AttnO => &self.att,
            LinearKind::MlpUp => &self.h2,
            LinearKind::MlpDown => &self.g,
        }
    }
}

pub(crate) struct Trace {
    pub blocks: Vec<BlockTrace>,
    pub lnf: LnCache,
    pub hf: Matrix,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut out = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let (g, b) = (gain.data(), bias.data());
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    let (t, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut att = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let scores = matmul_nt(&qh, &kh)?;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let s = &scores.row(i)[..=i];
            let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let prow = p.row_mut(i);
            let mut sum = 0.0f32;
            for j in 0..=i {
                let e = ((s[j] - max) * scale).exp();
                prow[j] = e;
                sum += e;
            }
            for pj in &mut prow[..=i] {
                *pj /= sum;
            }
        }
        let out = matmul(&p, &vh)?;
        att.set_columns(h * dh, &out);
        probs.push(p);
    }
    Ok((att, probs))
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::SequenceTooShort { need: 1, got: 0 });
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some((pos, &id)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= cfg.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            pos,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Runs the network up to the final layer norm.
fn forward_hidden(w: &WeightContainer, tokens: &[TokenId]) -> Result<Trace> {
    let cfg = w.config();
    check_tokens(cfg, tokens)?;
    let (tok, pos) = (w.t("tok_emb"), w.t("pos_emb"));
    let mut x = Matrix::from_fn(tokens.len(), cfg.d_model, |i, j| {
        tok.get(tokens[i] as usize, j) + pos.get(i, j)
    });

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for b in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{b}.{s}");
        let (h1, ln1) = layer_norm(&x, w.t(&name("ln1.gain")), w.t(&name("ln1.bias")));
        let q = matmul_nt(&h1, w.t(&name("attn_q")))?;
        let k = matmul_nt(&h1, w.t(&name("attn_k")))?;
        let v = matmul_nt(&h1, w.t(&name("attn_v")))?;
        let (att, probs) = causal_attention(&q, &k, &v, cfg.n_heads)?;
        let o = matmul_nt(&att, w.t(&name("attn_o")))?;
        x.add_assign(&o);

        let (h2, ln2) = layer_norm(&x, w.t(&name("ln2.gain")), w.t(&name("ln2.bias")));
        let u = matmul_nt(&h2, w.t(&name("mlp_up")))?;
        let g = u.map(gelu);
        let m = matmul_nt(&g, w.t(&name("mlp_down")))?;
        x.add_assign(&m);

        blocks.push(BlockTrace {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            ln2,
            h2,
            u,
            g,
        });
    }
    let (hf, lnf) = layer_norm(&x, w.t("ln_f.gain"), w.t("ln_f.bias"));
    if !hf.is_finite() {
        return Err(Error::NonFinite("hidden state".into()));
    }
    Ok(Trace { blocks, lnf, hf })
}

pub(crate) fn forward_trace(w: &WeightContainer, tokens: &[TokenId]) -> Result<(Matrix, Trace)> {
    let trace = forward_hidden(w, tokens)?;
    let logits = matmul_nt(&trace.hf, w.t("unembed"))?;
    Ok((logits, trace))
}

/// Logits for every position, `tokens × vocab_size`. Position `i` only sees
/// tokens `0..=i`.
pub fn forward(w: &WeightContainer, tokens: &[TokenId]) -> Result<Matrix> {
    forward_trace(w, tokens).map(|(logits, _)| logits)
}

/// Logits of the last position only.
pub(crate) fn forward_last_logits(w: &WeightContainer, tokens: &[TokenId]) -> Result<Vec<f32>> {
    let trace = forward_hidden(w, tokens)?;
    let hf = &trace.hf;
    let last = Matrix::from_vec(1, hf.cols(), hf.row(hf.rows() - 1).to_vec())?;
    Ok(matmul_nt(&last, w.t("unembed"))?.into_vec())
}

/// Forward pass that also returns the input activations of the named
/// prunable layers, in request order. Logits are identical to [`forward`].
pub fn forward_with_taps(
    w: &WeightContainer,
    tokens: &[TokenId],
    layers: &[LayerId],
) -> Result<(Matrix, Vec<ActivationTap>)> {
    let cfg = w.config();
    if let Some(bad) = layers.iter().find(|l| l.block >= cfg.n_layers) {
        return Err(Error::UnknownLayer(bad.to_string()));
    }
    let (logits, trace) = forward_trace(w, tokens)?;
    let taps = layers
        .iter()
        .map(|&layer| ActivationTap {
            layer,
            captured: trace.blocks[layer.block].input_of(layer.kind).clone(),
        })
        .collect();
    Ok((logits, taps))
}

/// Per-position next-token negative log-likelihood (natural log), length
/// `tokens.len() - 1`.
pub fn nll_per_token(w: &WeightContainer, tokens: &[TokenId]) -> Result<Vec<f32>> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort {
            need: 2,
            got: tokens.len(),
        });
    }
    let logits = forward(w, tokens)?;
    Ok((0..tokens.len() - 1)
        .map(|i| -log_softmax_f64(logits.row(i))[tokens[i + 1] as usize] as f32)
        .collect())
}
