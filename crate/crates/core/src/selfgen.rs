//! Self-generated calibration data.
//!
//! A short prefix is cut from a corpus window and the dense model continues
//! it to `max_len` tokens with repetition penalty, temperature, top-k and
//! top-p applied in that order. Samples are then scored by the dense model's
//! perplexity and the highest-perplexity fraction is discarded.

use serde::{Deserialize, Serialize};

use crate::calib::{sample_calibration, CalibrationSet, Corpus, Provenance};
use crate::diagnostics::perplexity;
use crate::error::{Error, Result};
use crate::model::{nll_per_token, Decoder, WeightContainer};
use crate::prune::{prune_model, PruneSpec};
use crate::rng::RngStream;
use crate::tensor::softmax_unchecked;
use crate::tokenizer::{TokenId, BOS};

pub const DEFAULT_FILTER_RATE: f64 = 0.20;

/// Which tokens the filter perplexity is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityScope {
    /// Prefix plus continuation.
    #[default]
    Full,
    /// Generated tokens only.
    Continuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub prefix_len: usize,
    pub max_len: usize,
    /// 0 disables top-k.
    pub top_k: usize,
    pub top_p: f32,
    pub temperature: f32,
    pub repetition_penalty: f32,
    pub scope: PerplexityScope,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            prefix_len: 4,
            max_len: 256,
            top_k: 50,
            top_p: 0.95,
            temperature: 0.6,
            repetition_penalty: 1.2,
            scope: PerplexityScope::Full,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_len >= self.max_len {
            return Err(Error::invalid(format!(
                "prefix_len {} must be < max_len {}",
                self.prefix_len, self.max_len
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::invalid(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub ids: Vec<TokenId>,
    pub prefix_len: usize,
    pub perplexity: f32,
}

/// Divides positive logits and multiplies negative logits of every id in
/// `history` by `penalty`. Each id is penalized once.
pub fn apply_repetition_penalty(logits: &mut [f32], history: &[TokenId], penalty: f32) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &id in history {
        let id = id as usize;
        if id < logits.len() && !seen[id] {
            seen[id] = true;
            let l = &mut logits[id];
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Restricts a probability vector to its `top_k` largest entries (0 = all),
/// then to the shortest descending prefix whose mass reaches `top_p`, and
/// renormalizes. Ties go to the lower index. Returns `(index, prob)` pairs in
/// descending probability order.
pub fn truncate_distribution(probs: &[f32], top_k: usize, top_p: f32) -> Vec<(usize, f32)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let mass: f64 = order.iter().map(|&i| f64::from(probs[i])).sum();
    let mut kept = Vec::with_capacity(order.len());
    let mut cum = 0.0f64;
    for &i in &order {
        let p = f64::from(probs[i]) / mass;
        kept.push((i, p));
        cum += p;
        if cum >= f64::from(top_p) {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&(_, p)| p).sum();
    kept.into_iter()
        .map(|(i, p)| (i, (p / total) as f32))
        .collect()
}

fn draw(support: &[(usize, f32)], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut cum = 0.0f64;
    for &(i, p) in support {
        cum += f64::from(p);
        if u < cum {
            return i;
        }
    }
    support.last().expect("non-empty support").0
}

/// One decoding step over raw next-token logits.
pub fn sample_next(
    logits: &[f32],
    history: &[TokenId],
    cfg: &GenerationConfig,
    rng: &mut RngStream,
) -> TokenId {
    let mut logits = logits.to_vec();
    apply_repetition_penalty(&mut logits, history, cfg.repetition_penalty);
    let probs = softmax_unchecked(&logits, cfg.temperature);
    let support = truncate_distribution(&probs, cfg.top_k, cfg.top_p);
    draw(&support, rng) as TokenId
}

fn sequence_perplexity(
    w: &WeightContainer,
    ids: &[TokenId],
    start: usize,
    scope: PerplexityScope,
) -> Result<f32> {
    let nll = nll_per_token(w, ids)?;
    // nll[i] scores ids[i + 1]
    let skip = match scope {
        PerplexityScope::Full => 0,
        PerplexityScope::Continuation => start.saturating_sub(1),
    };
    let tail = &nll[skip.min(nll.len() - 1)..];
    let mean = tail.iter().map(|&v| f64::from(v)).sum::<f64>() / tail.len() as f64;
    Ok(mean.exp() as f32)
}

/// Continues `prefix` to `cfg.max_len` tokens. An empty prefix (with
/// `prefix_len == 0`) starts from BOS alone.
pub fn generate_one(
    w: &WeightContainer,
    prefix: &[TokenId],
    cfg: &GenerationConfig,
    rng: &mut RngStream,
) -> Result<GeneratedSample> {
    cfg.validate()?;
    if prefix.len() != cfg.prefix_len {
        return Err(Error::invalid(format!(
            "prefix has {} tokens, config expects {}",
            prefix.len(),
            cfg.prefix_len
        )));
    }
    if cfg.max_len > w.config().max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.max_len,
            max: w.config().max_seq_len,
        });
    }
    let mut ids = if prefix.is_empty() {
        if !w.config().has_bos() {
            return Err(Error::invalid(
                "prefix length 0 needs a vocabulary with BOS",
            ));
        }
        vec![BOS]
    } else {
        prefix.to_vec()
    };
    let start = ids.len();
    let mut decoder = Decoder::new(w);
    let mut logits = decoder.feed(&ids)?;
    while ids.len() < cfg.max_len {
        let next = sample_next(&logits, &ids, cfg, rng);
        ids.push(next);
        if ids.len() < cfg.max_len {
            logits = decoder.step(next)?;
        }
    }
    let perplexity = sequence_perplexity(w, &ids, start, cfg.scope)?;
    Ok(GeneratedSample {
        ids,
        prefix_len: cfg.prefix_len,
        perplexity,
    })
}

/// `count` samples, each continuing an independently drawn corpus prefix.
/// Sample `i` decodes with stream `i` derived from `rng`, so results do not
/// depend on generation order.
pub fn generate_set(
    w: &WeightContainer,
    corpus: &Corpus,
    count: usize,
    cfg: &GenerationConfig,
    rng: &mut RngStream,
) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let prefixes: Vec<Vec<TokenId>> = if cfg.prefix_len == 0 {
        vec![Vec::new(); count]
    } else {
        sample_calibration(corpus, count, cfg.prefix_len, rng)?.sequences
    };
    prefixes
        .iter()
        .enumerate()
        .map(|(i, p)| generate_one(w, p, cfg, &mut rng.derive(i as u64)))
        .collect()
}

/// Removes the `⌈rate · len⌉` highest-perplexity samples, keeping the earlier
/// sample on ties. Survivors stay in input order.
pub fn perplexity_filter(samples: &[GeneratedSample], rate: f64) -> Result<Vec<GeneratedSample>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "filter rate must be in [0, 1), got {rate}"
        )));
    }
    let drop = (rate * samples.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[a]
            .perplexity
            .total_cmp(&samples[b].perplexity)
            .then(a.cmp(&b))
    });
    let mut keep = vec![true; samples.len()];
    for &i in order.iter().rev().take(drop) {
        keep[i] = false;
    }
    Ok(samples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s.clone())
        .collect())
}

pub fn to_calibration_set(
    samples: &[GeneratedSample],
    seed: u64,
    source_label: &str,
) -> CalibrationSet {
    CalibrationSet {
        sequences: samples.iter().map(|s| s.ids.clone()).collect(),
        provenance: Provenance::SelfGenerated,
        seed,
        source_label: source_label.to_string(),
        perplexities: Some(samples.iter().map(|s| s.perplexity).collect()),
    }
}

/// Shared settings for the prefix-length and filter-rate sweeps.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub generation: GenerationConfig,
    pub count: usize,
    pub filter_rate: f64,
    pub prune: PruneSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prefix_len: usize,
    pub filter_rate: f64,
    pub calibration_size: usize,
    pub mean_generation_ppl: f64,
    pub pruned_eval_ppl: f32,
}

fn sweep_row(
    w: &WeightContainer,
    corpus: &Corpus,
    eval: &[Vec<TokenId>],
    settings: &SweepSettings,
    generation: GenerationConfig,
    filter_rate: f64,
    stream: u64,
) -> Result<SweepRow> {
    let mut rng = RngStream::new(settings.seed, stream);
    let samples = generate_set(w, corpus, settings.count, &generation, &mut rng)?;
    let kept = perplexity_filter(&samples, filter_rate)?;
    let calib = to_calibration_set(&kept, settings.seed, corpus.source_label());
    let pruned = prune_model(w, &calib, &settings.prune)?.weights;
    let mean_generation_ppl =
        kept.iter().map(|s| f64::from(s.perplexity)).sum::<f64>() / kept.len().max(1) as f64;
    Ok(SweepRow {
        prefix_len: generation.prefix_len,
        filter_rate,
        calibration_size: kept.len(),
        mean_generation_ppl,
        pruned_eval_ppl: perplexity(&pruned, eval)?,
    })
}

/// One row per prefix length: generate, filter, prune, evaluate.
pub fn prefix_sweep(
    w: &WeightContainer,
    corpus: &Corpus,
    eval: &[Vec<TokenId>],
    prefix_lens: &[usize],
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>> {
    prefix_lens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t >= w.config().max_seq_len {
                return Err(Error::invalid(format!("prefix length {t} >= max_seq_len")));
            }
            let generation = GenerationConfig {
                prefix_len: t,
                ..settings.generation
            };
            sweep_row(
                w,
                corpus,
                eval,
                settings,
                generation,
                settings.filter_rate,
                i as u64,
            )
        })
        .collect()
}

/// One row per filter rate; every row filters the same generated pool.
pub fn filter_sweep(
    w: &WeightContainer,
    corpus: &Corpus,
    eval: &[Vec<TokenId>],
    rates: &[f64],
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>> {
    let mut rng = RngStream::new(settings.seed, 0);
    let samples = generate_set(w, corpus, settings.count, &settings.generation, &mut rng)?;
    rates
        .iter()
        .map(|&rate| {
            let kept = perplexity_filter(&samples, rate)?;
            let calib = to_calibration_set(&kept, settings.seed, corpus.source_label());
            let pruned = prune_model(w, &calib, &settings.prune)?.weights;
            Ok(SweepRow {
                prefix_len: settings.generation.prefix_len,
                filter_rate: rate,
                calibration_size: kept.len(),
                mean_generation_ppl: kept.iter().map(|s| f64::from(s.perplexity)).sum::<f64>()
                    / kept.len().max(1) as f64,
                pruned_eval_ppl: perplexity(&pruned, eval)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn model() -> WeightContainer {
        let cfg = ModelConfig {
            vocab_size: 257,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
        };
        WeightContainer::init_random(cfg, 0.5, &mut RngStream::new(4, 0)).unwrap()
    }

    fn sample(ppl: f32) -> GeneratedSample {
        GeneratedSample {
            ids: vec![0, 1],
            prefix_len: 1,
            perplexity: ppl,
        }
    }

    #[test]
    fn documented_defaults() {
        let c = GenerationConfig::default();
        assert_eq!(
            (c.top_p, c.top_k, c.temperature, c.repetition_penalty),
            (0.95, 50, 0.6, 1.2)
        );
        assert_eq!(c.prefix_len, 4);
        assert_eq!(DEFAULT_FILTER_RATE, 0.20);
    }

    #[test]
    fn penalty_rule() {
        let mut l = vec![2.0, -2.0, 0.5];
        apply_repetition_penalty(&mut l, &[0, 1, 0], 1.2);
        assert!((l[0] - 1.666_666_7).abs() < 1e-6);
        assert!((l[1] + 2.4).abs() < 1e-6);
        assert_eq!(l[2], 0.5);
    }

    #[test]
    fn nucleus_example() {
        let s = truncate_distribution(&[0.5, 0.3, 0.15, 0.05], 0, 0.9);
        let idx: Vec<usize> = s.iter().map(|x| x.0).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        for (got, want) in s.iter().map(|x| x.1).zip([0.5263, 0.3158, 0.1579]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn top_k_one_is_greedy() {
        let logits = [0.1, 3.0, 2.9, -1.0];
        let cfg = GenerationConfig {
            top_k: 1,
            top_p: 0.3,
            temperature: 5.0,
            repetition_penalty: 1.0,
            ..GenerationConfig::default()
        };
        let mut rng = RngStream::new(0, 0);
        for _ in 0..50 {
            assert_eq!(sample_next(&logits, &[], &cfg, &mut rng), 1);
        }
    }

    #[test]
    fn generation_contract() {
        let w = model();
        let cfg = GenerationConfig {
            prefix_len: 3,
            max_len: 12,
            ..GenerationConfig::default()
        };
        let s = generate_one(&w, &[72, 105, 33], &cfg, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(s.ids.len(), 12);
        assert_eq!(&s.ids[..3], &[72, 105, 33]);
        assert!(s.perplexity > 0.0);
        let again = generate_one(&w, &[72, 105, 33], &cfg, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(s, again);
        assert!(generate_one(&w, &[72], &cfg, &mut RngStream::new(1, 1)).is_err());

        let bos = GenerationConfig {
            prefix_len: 0,
            ..cfg
        };
        let s = generate_one(&w, &[], &bos, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(s.ids[0], BOS);
        assert_eq!(s.ids.len(), 12);
    }

    #[test]
    fn generate_set_shapes() {
        let w = model();
        let corpus = Corpus::new(vec!["hello world, this is a corpus".into()], "c").unwrap();
        let cfg = GenerationConfig {
            prefix_len: 4,
            max_len: 10,
            ..GenerationConfig::default()
        };
        assert!(
            generate_set(&w, &corpus, 0, &cfg, &mut RngStream::new(0, 0))
                .unwrap()
                .is_empty()
        );
        let set = generate_set(&w, &corpus, 5, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(set.len(), 5);
        for s in &set {
            assert_eq!(s.ids.len(), 10);
            let prefix = crate::tokenizer::to_bytes(&s.ids[..4]);
            assert!(corpus.documents()[0]
                .as_bytes()
                .windows(4)
                .any(|win| win == prefix.as_slice()));
        }
    }

    #[test]
    fn filter_examples() {
        let samples: Vec<_> = [5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0, 10.0]
            .into_iter()
            .map(sample)
            .collect();
        assert_eq!(perplexity_filter(&samples, 0.0).unwrap(), samples);
        let kept = perplexity_filter(&samples, 0.2).unwrap();
        let mut ppl: Vec<f32> = kept.iter().map(|s| s.perplexity).collect();
        assert_eq!(ppl, vec![5.0, 1.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0]);
        ppl.sort_by(f32::total_cmp);
        assert_eq!(ppl, (1..=8).map(|v| v as f32).collect::<Vec<_>>());
        assert!(perplexity_filter(&samples, 1.0).is_err());
    }

    #[test]
    fn filter_ties_keep_earlier() {
        let samples = vec![sample(2.0), sample(2.0), sample(1.0)];
        let kept = perplexity_filter(&samples, 0.3).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(
            kept.iter().map(|s| s.perplexity).collect::<Vec<_>>(),
            vec![2.0, 1.0]
        );
    }

    proptest! {
        #[test]
        fn unit_penalty_is_identity(logits in prop::collection::vec(-10f32..10.0, 1..40),
                                    hist in prop::collection::vec(0u32..40, 0..30)) {
            let mut out = logits.clone();
            apply_repetition_penalty(&mut out, &hist, 1.0);
            prop_assert_eq!(
                out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn sampled_token_has_support(logits in prop::collection::vec(-8f32..8.0, 2..60),
                                     top_k in 0usize..10, top_p in 0.05f32..1.0,
                                     temp in 0.1f32..2.0, pen in 1.0f32..2.0, seed in any::<u64>()) {
            let cfg = GenerationConfig { top_k, top_p, temperature: temp, repetition_penalty: pen,
                                         ..GenerationConfig::default() };
            let hist = [0u32, 1];
            let tok = sample_next(&logits, &hist, &cfg, &mut RngStream::new(seed, 0)) as usize;
            let mut l = logits.clone();
            apply_repetition_penalty(&mut l, &hist, pen);
            let support = truncate_distribution(&softmax_unchecked(&l, temp), top_k, top_p);
            prop_assert!(support.iter().any(|&(i, p)| i == tok && p > 0.0));
        }

        #[test]
        fn filter_is_monotone(ppl in prop::collection::vec(1f32..100.0, 1..40), rate in 0.0f64..0.95) {
            let samples: Vec<_> = ppl.iter().map(|&p| sample(p)).collect();
            let kept = perplexity_filter(&samples, rate).unwrap();
            let kept_max = kept.iter().map(|s| s.perplexity).fold(f32::MIN, f32::max);
            let mut counts = std::collections::HashMap::new();
            for s in &kept { *counts.entry(s.perplexity.to_bits()).or_insert(0usize) += 1; }
            let removed: Vec<f32> = samples.iter().filter(|s| {
                let c = counts.entry(s.perplexity.to_bits()).or_insert(0);
                if *c > 0 { *c -= 1; false } else { true }
            }).map(|s| s.perplexity).collect();
            for r in removed { prop_assert!(kept_max <= r); }
        }
    }
}
