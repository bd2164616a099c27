//! Min-K%++: the observed token's log-probability standardized by the mean
//! and standard deviation of the next-token log-probability, averaged over
//! the lowest-scoring fraction of positions. Higher means more member-like.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, forward_last_logits, WeightContainer};
use crate::tensor::log_softmax_f64;
use crate::tokenizer::TokenId;

pub const DEFAULT_K_FRACTION: f64 = 0.5;
/// Below this standard deviation the score is defined as 0.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinKppScore {
    pub sequence_score: f32,
    pub k_fraction: f64,
    /// One score per predicted position `1..T`.
    pub token_scores: Vec<f32>,
}

/// Score of `next` under the distribution given by `logits`.
pub fn minkpp_from_logits(logits: &[f32], next: TokenId) -> f32 {
    let logp = log_softmax_f64(logits);
    let mu: f64 = logp.iter().map(|&l| l.exp() * l).sum();
    let var: f64 = logp.iter().map(|&l| l.exp() * (l - mu) * (l - mu)).sum();
    let sigma = var.max(0.0).sqrt();
    if sigma < SIGMA_FLOOR {
        return 0.0;
    }
    ((logp[next as usize] - mu) / sigma) as f32
}

pub fn minkpp_token(w: &WeightContainer, prefix: &[TokenId], next: TokenId) -> Result<f32> {
    if prefix.is_empty() {
        return Err(Error::invalid("Min-K%++ needs a non-empty prefix"));
    }
    if next as usize >= w.config().vocab_size {
        return Err(Error::TokenOutOfRange {
            id: next,
            pos: prefix.len(),
            vocab_size: w.config().vocab_size,
        });
    }
    Ok(minkpp_from_logits(&forward_last_logits(w, prefix)?, next))
}

fn check_k(k_fraction: f64) -> Result<()> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "k fraction must be in (0, 1], got {k_fraction}"
        )));
    }
    Ok(())
}

/// Mean of the `⌈k·T⌉` smallest scores.
fn bottom_k_mean(scores: &[f32], k_fraction: f64) -> f32 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f32::total_cmp);
    let take = ((k_fraction * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    let sum: f64 = sorted[..take].iter().map(|&v| f64::from(v)).sum();
    (sum / take as f64) as f32
}

pub fn minkpp_sequence(
    w: &WeightContainer,
    tokens: &[TokenId],
    k_fraction: f64,
) -> Result<MinKppScore> {
    check_k(k_fraction)?;
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort {
            need: 2,
            got: tokens.len(),
        });
    }
    let logits = forward(w, tokens)?;
    let token_scores: Vec<f32> = (0..tokens.len() - 1)
        .map(|i| minkpp_from_logits(logits.row(i), tokens[i + 1]))
        .collect();
    Ok(MinKppScore {
        sequence_score: bottom_k_mean(&token_scores, k_fraction),
        k_fraction,
        token_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub member_scores: Vec<f32>,
    pub nonmember_scores: Vec<f32>,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub mean_difference: f64,
    /// Probability that a random member outscores a random non-member.
    pub auroc: f64,
}

/// Rank-based AUROC with ties counted as one half.
pub fn auroc(positives: &[f32], negatives: &[f32]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("AUROC needs both classes"));
    }
    let mut all: Vec<(f32, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of average ranks (1-based) of the positives.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

pub fn minkpp_separation(
    w: &WeightContainer,
    members: &[Vec<TokenId>],
    nonmembers: &[Vec<TokenId>],
    k_fraction: f64,
) -> Result<SeparationReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid(
            "both member and non-member sets must be non-empty",
        ));
    }
    let score = |set: &[Vec<TokenId>]| -> Result<Vec<f32>> {
        set.iter()
            .map(|s| minkpp_sequence(w, s, k_fraction).map(|r| r.sequence_score))
            .collect()
    };
    let member_scores = score(members)?;
    let nonmember_scores = score(nonmembers)?;
    let member_mean = mean(&member_scores);
    let nonmember_mean = mean(&nonmember_scores);
    Ok(SeparationReport {
        auroc: auroc(&member_scores, &nonmember_scores)?,
        member_mean,
        nonmember_mean,
        mean_difference: member_mean - nonmember_mean,
        member_scores,
        nonmember_scores,
    })
}
