use std::collections::BTreeMap;

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{forward_trace, LayerId, LinearKind, WeightContainer};
use crate::tensor::{matmul_tn, Matrix};
use crate::tokenizer::TokenId;

/// Per-input-channel activation statistics of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub layer: LayerId,
    /// `Σ x_j²` over every calibration token.
    pub sq_norm_acc: Vec<f32>,
    pub token_count: usize,
    /// `Σ xᵀx`, `in × in`, only when requested.
    pub gram: Option<Matrix>,
}

impl ActivationStats {
    /// `‖X_j‖₂` per input channel.
    pub fn channel_norms(&self) -> Vec<f32> {
        self.sq_norm_acc.iter().map(|v| v.sqrt()).collect()
    }

    pub fn gram(&self) -> Result<&Matrix> {
        self.gram
            .as_ref()
            .ok_or_else(|| Error::MissingGram(self.layer.to_string()))
    }

    /// Stats built directly from channel norms, for callers that already have them.
    pub fn from_norms(layer: LayerId, norms: &[f32]) -> Self {
        ActivationStats {
            layer,
            sq_norm_acc: norms.iter().map(|n| n * n).collect(),
            token_count: 0,
            gram: None,
        }
    }
}

pub type StatsMap = BTreeMap<LayerId, ActivationStats>;

struct Accumulator {
    sq: Vec<f64>,
    gram: Option<Vec<f64>>,
}

impl Accumulator {
    fn new(dim: usize, with_gram: bool) -> Self {
        Accumulator {
            sq: vec![0.0; dim],
            gram: with_gram.then(|| vec![0.0; dim * dim]),
        }
    }

    fn add(&mut self, x: &Matrix) -> Result<()> {
        for t in 0..x.rows() {
            for (acc, &v) in self.sq.iter_mut().zip(x.row(t)) {
                *acc += f64::from(v) * f64::from(v);
            }
        }
        if let Some(g) = &mut self.gram {
            let part = matmul_tn(x, x)?;
            for (acc, &v) in g.iter_mut().zip(part.data()) {
                *acc += f64::from(v);
            }
        }
        Ok(())
    }
}

fn chunks(seqs: &[Vec<TokenId>], max: usize) -> impl Iterator<Item = &[TokenId]> {
    seqs.iter().flat_map(move |s| s.chunks(max))
}

/// Runs the dense model over every calibration sequence (split into
/// `max_seq_len` chunks) and accumulates input statistics for all prunable
/// layers. Sequences are reduced in input order.
pub fn collect_stats(
    w: &WeightContainer,
    calib: &CalibrationSet,
    with_gram: bool,
) -> Result<StatsMap> {
    collect_stats_for(w, &calib.sequences, with_gram)
}

pub fn collect_stats_for(
    w: &WeightContainer,
    seqs: &[Vec<TokenId>],
    with_gram: bool,
) -> Result<StatsMap> {
    if seqs.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCalibration);
    }
    let cfg = *w.config();
    // q/k/v share one input, so accumulate per distinct input site.
    let sites = [
        LinearKind::AttnQ,
        LinearKind::AttnO,
        LinearKind::MlpUp,
        LinearKind::MlpDown,
    ];
    let mut accs: BTreeMap<(usize, LinearKind), Accumulator> = BTreeMap::new();
    for b in 0..cfg.n_layers {
        for kind in sites {
            accs.insert((b, kind), Accumulator::new(kind.shape(&cfg).1, with_gram));
        }
    }
    let mut token_count = 0;
    for chunk in chunks(seqs, cfg.max_seq_len) {
        let (_, trace) = forward_trace(w, chunk)?;
        token_count += chunk.len();
        for (&(b, kind), acc) in accs.iter_mut() {
            acc.add(trace.blocks[b].input_of(kind))?;
        }
    }

    let mut out = StatsMap::new();
    for layer in cfg.prunable_layers() {
        let site = match layer.kind {
            LinearKind::AttnK | LinearKind::AttnV => LinearKind::AttnQ,
            k => k,
        };
        let acc = &accs[&(layer.block, site)];
        let dim = acc.sq.len();
        let gram = match &acc.gram {
            Some(g) => Some(Matrix::from_vec(
                dim,
                dim,
                g.iter().map(|&v| v as f32).collect(),
            )?),
            None => None,
        };
        out.insert(
            layer,
            ActivationStats {
                layer,
                sq_norm_acc: acc.sq.iter().map(|&v| v as f32).collect(),
                token_count,
                gram,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::Provenance;
    use crate::model::ModelConfig;
    use crate::rng::RngStream;

    fn setup() -> (WeightContainer, CalibrationSet) {
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
        };
        let w = WeightContainer::init_random(cfg, 0.4, &mut RngStream::new(8, 0)).unwrap();
        let mut rng = RngStream::new(2, 0);
        let seqs = (0..3)
            .map(|_| (0..9).map(|_| rng.below(30) as u32).collect())
            .collect();
        let calib = CalibrationSet {
            sequences: seqs,
            provenance: Provenance::Sampled,
            seed: 2,
            source_label: "t".into(),
            perplexities: None,
        };
        (w, calib)
    }

    #[test]
    fn direct_accumulation() {
        let layer = LayerId::new(0, LinearKind::AttnQ);
        let mut acc = Accumulator::new(2, true);
        acc.add(&Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(acc.sq, vec![9.0, 16.0]);
        let s = ActivationStats {
            layer,
            sq_norm_acc: acc.sq.iter().map(|&v| v as f32).collect(),
            token_count: 1,
            gram: None,
        };
        assert_eq!(s.channel_norms(), vec![3.0, 4.0]);
        assert_eq!(acc.gram.unwrap(), vec![9.0, 12.0, 12.0, 16.0]);
    }

    #[test]
    fn token_count_and_duplication() {
        let (w, calib) = setup();
        let stats = collect_stats(&w, &calib, false).unwrap();
        assert_eq!(stats.len(), 12);
        let any = stats.values().next().unwrap();
        assert_eq!(any.token_count, 27);

        let mut doubled = calib.clone();
        doubled.sequences.extend(calib.sequences.clone());
        let stats2 = collect_stats(&w, &doubled, false).unwrap();
        for (layer, s) in &stats {
            let d = &stats2[layer];
            for (a, b) in s.sq_norm_acc.iter().zip(&d.sq_norm_acc) {
                assert_eq!(2.0 * a, *b, "{layer}");
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd_and_matches_norms() {
        let (w, calib) = setup();
        let stats = collect_stats(&w, &calib, true).unwrap();
        let mut rng = RngStream::new(5, 5);
        for s in stats.values() {
            let g = s.gram().unwrap();
            let n = g.rows();
            for i in 0..n {
                assert!((g.get(i, i) - s.sq_norm_acc[i]).abs() <= 1e-4 * s.sq_norm_acc[i].max(1.0));
                for j in 0..n {
                    assert!((g.get(i, j) - g.get(j, i)).abs() < 1e-4);
                }
            }
            for _ in 0..20 {
                let v: Vec<f32> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
                let q: f32 = (0..n)
                    .map(|i| (0..n).map(|j| v[i] * g.get(i, j) * v[j]).sum::<f32>())
                    .sum();
                assert!(q >= -1e-4);
            }
        }
    }

    #[test]
    fn empty_calibration_rejected() {
        let (w, mut calib) = setup();
        calib.sequences.clear();
        assert!(matches!(
            collect_stats(&w, &calib, false),
            Err(Error::EmptyCalibration)
        ));
    }
}
