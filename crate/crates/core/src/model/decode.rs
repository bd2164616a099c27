//! Incremental decoding with a key/value cache. Each step performs the same
//! per-row arithmetic as the full forward pass, so logits agree with
//! [`super::forward`] on the same prefix.

use super::forward::{check_tokens, gelu, layer_norm};
use super::WeightContainer;
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt, Matrix};
use crate::tokenizer::TokenId;

pub(crate) struct Decoder<'a> {
    w: &'a WeightContainer,
    /// Per block, one `d_model` row per cached position.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(w: &'a WeightContainer) -> Self {
        let n = w.config().n_layers;
        Decoder {
            w,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feeds `tokens` and returns the logits after the last one.
    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let Some((&last, head)) = tokens.split_last() else {
            return Err(Error::SequenceTooShort { need: 1, got: 0 });
        };
        for &t in head {
            self.step(t)?;
        }
        self.step(last)
    }

    pub fn step(&mut self, token: TokenId) -> Result<Vec<f32>> {
        let w = self.w;
        let cfg = w.config();
        if self.len >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        check_tokens(cfg, &[token])?;
        let d = cfg.d_model;
        let pos = self.len;
        let (tok, pe) = (w.t("tok_emb"), w.t("pos_emb"));
        let mut x = Matrix::from_fn(1, d, |_, j| tok.get(token as usize, j) + pe.get(pos, j));

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        for b in 0..cfg.n_layers {
            let name = |s: &str| format!("layers.{b}.{s}");
            let (h1, _) = layer_norm(&x, w.t(&name("ln1.gain")), w.t(&name("ln1.bias")));
            let q = matmul_nt(&h1, w.t(&name("attn_q")))?;
            let k = matmul_nt(&h1, w.t(&name("attn_k")))?;
            let v = matmul_nt(&h1, w.t(&name("attn_v")))?;
            self.keys[b].extend_from_slice(k.data());
            self.values[b].extend_from_slice(v.data());
            let n = pos + 1;
            let (keys, values) = (&self.keys[b], &self.values[b]);

            let mut att = Matrix::zeros(1, d);
            let mut scores = vec![0.0f32; n];
            for h in 0..cfg.n_heads {
                let qh = &q.data()[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]);
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                let mut probs: Vec<f32> = scores
                    .iter()
                    .map(|&s| {
                        let e = ((s - max) * scale).exp();
                        sum += e;
                        e
                    })
                    .collect();
                for p in &mut probs {
                    *p /= sum;
                }
                let out = &mut att.data_mut()[h * dh..(h + 1) * dh];
                for (j, &p) in probs.iter().enumerate() {
                    for (o, &vv) in out
                        .iter_mut()
                        .zip(&values[j * d + h * dh..j * d + (h + 1) * dh])
                    {
                        *o += p * vv;
                    }
                }
            }
            let o = matmul_nt(&att, w.t(&name("attn_o")))?;
            x.add_assign(&o);
            let (h2, _) = layer_norm(&x, w.t(&name("ln2.gain")), w.t(&name("ln2.bias")));
            let g = matmul_nt(&h2, w.t(&name("mlp_up")))?.map(gelu);
            x.add_assign(&matmul_nt(&g, w.t(&name("mlp_down")))?);
        }
        self.len += 1;
        let (hf, _) = layer_norm(&x, w.t("ln_f.gain"), w.t("ln_f.bias"));
        let logits = matmul_nt(&hf, w.t("unembed"))?;
        Ok(logits.into_vec())
    }
}
