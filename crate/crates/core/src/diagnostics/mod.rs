//! Perplexity, Min-K%++ membership scores and MinHash corpus similarity.

mod minhash;
mod minkpp;

pub use minhash::{
    corpus_shingles, corpus_similarity, jaccard_exact, minhash_estimate, minhash_signature,
    shingle_set, MinHashSignature, Shingle, ShingleUnit, SimilarityReport, DEFAULT_NGRAM,
};
pub use minkpp::{
    auroc, minkpp_from_logits, minkpp_separation, minkpp_sequence, minkpp_token, MinKppScore,
    SeparationReport, DEFAULT_K_FRACTION, SIGMA_FLOOR,
};

use crate::calib::Corpus;
use crate::error::{Error, Result};
use crate::model::{nll_per_token, WeightContainer};
use crate::tokenizer::TokenId;

/// `exp` of the token-weighted mean next-token NLL over all sequences.
pub fn perplexity(w: &WeightContainer, data: &[Vec<TokenId>]) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::invalid("perplexity needs at least one sequence"));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for seq in data {
        let nll = nll_per_token(w, seq)?;
        sum += nll.iter().map(|&v| f64::from(v)).sum::<f64>();
        count += nll.len();
    }
    Ok((sum / count as f64).exp() as f32)
}

/// Non-overlapping windows of `len` tokens over the BOS-joined corpus, at
/// most `max_windows` of them, taken from the start. A trailing partial
/// window is kept when it has at least two tokens.
pub fn eval_windows(
    corpus: &Corpus,
    len: usize,
    max_windows: Option<usize>,
) -> Result<Vec<Vec<TokenId>>> {
    if len < 2 {
        return Err(Error::invalid("evaluation windows need at least 2 tokens"));
    }
    let all = corpus.concatenated();
    let mut out: Vec<Vec<TokenId>> = all
        .chunks(len)
        .filter(|c| c.len() >= 2)
        .map(<[TokenId]>::to_vec)
        .collect();
    if let Some(m) = max_windows {
        out.truncate(m);
    }
    Ok(out)
}
