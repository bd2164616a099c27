//! Independent f64 implementation of the decoder's loss, written directly
//! from the architecture description (pre-norm blocks, learned positions,
//! tanh-GELU, causal softmax attention, final layer norm, untied unembed).

use std::collections::BTreeMap;

use calibprune::{ModelConfig, TokenId, WeightContainer};

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn to_f64(w: &WeightContainer) -> Params {
    w.tensors()
        .iter()
        .map(|(k, m)| (k.clone(), m.data().iter().map(|&v| f64::from(v)).collect()))
        .collect()
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect()
}

/// `y = W x` for `W` stored row-major as `out × in`.
fn linear(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    (0..out)
        .map(|o| (0..inp).map(|i| w[o * inp + i] * x[i]).sum())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Mean next-token cross-entropy over the batch.
pub fn loss(p: &Params, cfg: &ModelConfig, batch: &[Vec<TokenId>]) -> f64 {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in batch {
        let t = seq.len();
        let mut xs: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                (0..d)
                    .map(|j| p["tok_emb"][seq[i] as usize * d + j] + p["pos_emb"][i * d + j])
                    .collect()
            })
            .collect();
        for b in 0..cfg.n_layers {
            let k = |s: &str| format!("layers.{b}.{s}");
            let h: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| ln(x, &p[&k("ln1.gain")], &p[&k("ln1.bias")]))
                .collect();
            let q: Vec<Vec<f64>> = h.iter().map(|x| linear(&p[&k("attn_q")], x, d)).collect();
            let kk: Vec<Vec<f64>> = h.iter().map(|x| linear(&p[&k("attn_k")], x, d)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|x| linear(&p[&k("attn_v")], x, d)).collect();
            let mut att = vec![vec![0.0; d]; t];
            for head in 0..cfg.n_heads {
                let r = head * dh..(head + 1) * dh;
                for i in 0..t {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            q[i][r.clone()]
                                .iter()
                                .zip(&kk[j][r.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for c in r.clone() {
                            att[i][c] += ej / z * v[j][c];
                        }
                    }
                }
            }
            for i in 0..t {
                let o = linear(&p[&k("attn_o")], &att[i], d);
                for j in 0..d {
                    xs[i][j] += o[j];
                }
                let h2 = ln(&xs[i], &p[&k("ln2.gain")], &p[&k("ln2.bias")]);
                let u: Vec<f64> = linear(&p[&k("mlp_up")], &h2, cfg.d_ff)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let m = linear(&p[&k("mlp_down")], &u, d);
                for j in 0..d {
                    xs[i][j] += m[j];
                }
            }
        }
        for i in 0..t - 1 {
            let hf = ln(&xs[i], &p["ln_f.gain"], &p["ln_f.bias"]);
            let logits = linear(&p["unembed"], &hf, cfg.vocab_size);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
            total += lse - logits[seq[i + 1] as usize];
            count += 1;
        }
    }
    total / count as f64
}
