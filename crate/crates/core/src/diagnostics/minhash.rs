//! n-gram shingles, exact Jaccard similarity and MinHash estimates.
//!
//! Permutation `i` is the universal hash `(a_i·h + b_i) mod (2⁶¹ − 1)` over a
//! 64-bit base hash `h` of the shingle, with `(a_i, b_i)` drawn from a seeded
//! stream.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::Corpus;
use crate::error::{Error, Result};
use crate::rng::{splitmix, RngStream};

pub const DEFAULT_NGRAM: usize = 3;
const MERSENNE_61: u64 = (1 << 61) - 1;

/// A shingle's bytes. Word shingles are the lowercased words joined by one space.
pub type Shingle = Vec<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShingleUnit {
    #[default]
    Word,
    Byte,
}

impl fmt::Display for ShingleUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShingleUnit::Word => "word",
            ShingleUnit::Byte => "byte",
        })
    }
}

impl FromStr for ShingleUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(ShingleUnit::Word),
            "byte" => Ok(ShingleUnit::Byte),
            _ => Err(Error::invalid(format!("unknown shingle unit `{s}`"))),
        }
    }
}

pub fn shingle_set(text: &str, n: usize, unit: ShingleUnit) -> Result<BTreeSet<Shingle>> {
    if n == 0 {
        return Err(Error::invalid("shingle size must be >= 1"));
    }
    let mut out = BTreeSet::new();
    match unit {
        ShingleUnit::Word => {
            let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
            for win in words.windows(n) {
                out.insert(win.join(" ").into_bytes());
            }
        }
        ShingleUnit::Byte => {
            for win in text.as_bytes().windows(n) {
                out.insert(win.to_vec());
            }
        }
    }
    Ok(out)
}

/// Union of the shingle sets of every document.
pub fn corpus_shingles(corpus: &Corpus, n: usize, unit: ShingleUnit) -> Result<BTreeSet<Shingle>> {
    let mut out = BTreeSet::new();
    for d in corpus.documents() {
        out.append(&mut shingle_set(d, n, unit)?);
    }
    Ok(out)
}

/// `|a ∩ b| / |a ∪ b|`, and 1 when both are empty.
pub fn jaccard_exact(a: &BTreeSet<Shingle>, b: &BTreeSet<Shingle>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub num_perms: usize,
    pub seed: u64,
    /// Minimum permuted hash per permutation; `u64::MAX` for an empty set.
    pub mins: Vec<u64>,
}

fn base_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(h) % MERSENNE_61
}

fn permutations(num_perms: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = RngStream::new(seed, 0x6d69_6e68);
    (0..num_perms)
        .map(|_| {
            (
                rng.random_range(1..MERSENNE_61),
                rng.random_range(0..MERSENNE_61),
            )
        })
        .collect()
}

pub fn minhash_signature(
    shingles: &BTreeSet<Shingle>,
    num_perms: usize,
    seed: u64,
) -> Result<MinHashSignature> {
    if num_perms == 0 {
        return Err(Error::invalid("num_perms must be >= 1"));
    }
    let perms = permutations(num_perms, seed);
    let mut mins = vec![u64::MAX; num_perms];
    for s in shingles {
        let h = u128::from(base_hash(s));
        for (m, &(a, b)) in mins.iter_mut().zip(&perms) {
            let v = ((u128::from(a) * h + u128::from(b)) % u128::from(MERSENNE_61)) as u64;
            if v < *m {
                *m = v;
            }
        }
    }
    Ok(MinHashSignature {
        num_perms,
        seed,
        mins,
    })
}

/// Fraction of coordinates on which the two signatures agree.
pub fn minhash_estimate(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64> {
    if a.num_perms != b.num_perms || a.seed != b.seed || a.mins.len() != b.mins.len() {
        return Err(Error::invalid(format!(
            "signatures differ: {}@{} vs {}@{}",
            a.num_perms, a.seed, b.num_perms, b.seed
        )));
    }
    let agree = a.mins.iter().zip(&b.mins).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.num_perms as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub a: String,
    pub b: String,
    pub ngram: usize,
    pub exact: Option<f64>,
    pub estimate: f64,
    pub num_perms: usize,
    pub seed: u64,
}

/// Similarity of two corpora, each reduced to the union of its shingles.
pub fn corpus_similarity(
    a: &Corpus,
    b: &Corpus,
    ngram: usize,
    unit: ShingleUnit,
    num_perms: usize,
    seed: u64,
    with_exact: bool,
) -> Result<SimilarityReport> {
    let sa = corpus_shingles(a, ngram, unit)?;
    let sb = corpus_shingles(b, ngram, unit)?;
    let estimate = minhash_estimate(
        &minhash_signature(&sa, num_perms, seed)?,
        &minhash_signature(&sb, num_perms, seed)?,
    )?;
    Ok(SimilarityReport {
        a: a.source_label().to_string(),
        b: b.source_label().to_string(),
        ngram,
        exact: with_exact.then(|| jaccard_exact(&sa, &sb)),
        estimate,
        num_perms,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<Shingle> {
        items.iter().map(|s| s.as_bytes().to_vec()).collect()
    }

    fn random_set(rng: &mut RngStream, size: usize, universe: usize) -> BTreeSet<Shingle> {
        (0..size)
            .map(|_| rng.below(universe).to_string().into_bytes())
            .collect()
    }

    #[test]
    fn word_shingles() {
        assert_eq!(
            shingle_set("a b c d", 3, ShingleUnit::Word).unwrap(),
            set(&["a b c", "b c d"])
        );
        assert_eq!(
            shingle_set("A  b\nC", 3, ShingleUnit::Word).unwrap(),
            set(&["a b c"])
        );
        assert!(shingle_set("a b", 3, ShingleUnit::Word).unwrap().is_empty());
        assert_eq!(
            shingle_set("abab", 2, ShingleUnit::Byte).unwrap(),
            set(&["ab", "ba"])
        );
        assert!(shingle_set("a", 0, ShingleUnit::Word).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(
            jaccard_exact(&set(&["ab", "bc", "cd"]), &set(&["bc", "cd", "de"])),
            0.5
        );
        assert_eq!(jaccard_exact(&set(&["x"]), &set(&["x"])), 1.0);
        assert_eq!(jaccard_exact(&set(&["x"]), &set(&["y"])), 0.0);
        assert_eq!(jaccard_exact(&set(&[]), &set(&[])), 1.0);
    }

    #[test]
    fn identical_sets_estimate_one() {
        let mut rng = RngStream::new(1, 0);
        let s = random_set(&mut rng, 300, 10_000);
        let a = minhash_signature(&s, 128, 9).unwrap();
        assert_eq!(minhash_estimate(&a, &a.clone()).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_sets_estimate_low() {
        let a: BTreeSet<Shingle> = (0..2000).map(|i| format!("a{i}").into_bytes()).collect();
        let b: BTreeSet<Shingle> = (0..2000).map(|i| format!("b{i}").into_bytes()).collect();
        let e = minhash_estimate(
            &minhash_signature(&a, 128, 3).unwrap(),
            &minhash_signature(&b, 128, 3).unwrap(),
        )
        .unwrap();
        assert!(e < 0.05, "{e}");
    }

    #[test]
    fn mismatched_signatures_rejected() {
        let s = set(&["a"]);
        let a = minhash_signature(&s, 16, 1).unwrap();
        assert!(minhash_estimate(&a, &minhash_signature(&s, 32, 1).unwrap()).is_err());
        assert!(minhash_estimate(&a, &minhash_signature(&s, 16, 2).unwrap()).is_err());
    }

    #[test]
    fn estimate_error_shrinks_with_perms() {
        let mut rng = RngStream::new(11, 0);
        for (perms, tol) in [(128, 0.15), (1024, 0.06)] {
            for i in 0..100 {
                let a = random_set(&mut rng, 200, 400);
                let b = random_set(&mut rng, 200, 400);
                let exact = jaccard_exact(&a, &b);
                let est = minhash_estimate(
                    &minhash_signature(&a, perms, i).unwrap(),
                    &minhash_signature(&b, perms, i).unwrap(),
                )
                .unwrap();
                assert!((est - exact).abs() <= tol, "{perms}: {est} vs {exact}");
            }
        }
    }

    #[test]
    fn estimator_is_unbiased() {
        let mut rng = RngStream::new(12, 0);
        let a = random_set(&mut rng, 60, 120);
        let b = random_set(&mut rng, 60, 120);
        let exact = jaccard_exact(&a, &b);
        let n = 2000;
        let mean: f64 = (0..n)
            .map(|seed| {
                minhash_estimate(
                    &minhash_signature(&a, 16, seed).unwrap(),
                    &minhash_signature(&b, 16, seed).unwrap(),
                )
                .unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - exact).abs() < 0.01, "{mean} vs {exact}");
    }

    #[test]
    fn corpus_report_shape() {
        let a = Corpus::new(vec!["the cat sat on the mat".into()], "a").unwrap();
        let b = Corpus::new(vec!["the cat sat on a rug".into()], "b").unwrap();
        let r = corpus_similarity(&a, &b, 3, ShingleUnit::Word, 64, 5, true).unwrap();
        // {the cat sat, cat sat on, sat on the, on the mat} vs {the cat sat, cat sat on, sat on a, on a rug}
        assert_eq!(r.exact, Some(2.0 / 6.0));
        let json = serde_json::to_value(&r).unwrap();
        for key in ["a", "b", "ngram", "exact", "estimate", "num_perms", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn jaccard_symmetric_bounded(a in prop::collection::btree_set("[a-d]{1,2}", 0..8),
                                     b in prop::collection::btree_set("[a-d]{1,2}", 0..8)) {
            let a: BTreeSet<Shingle> = a.into_iter().map(String::into_bytes).collect();
            let b: BTreeSet<Shingle> = b.into_iter().map(String::into_bytes).collect();
            let j = jaccard_exact(&a, &b);
            prop_assert_eq!(j, jaccard_exact(&b, &a));
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j == 1.0, a == b);
        }

        #[test]
        fn shingle_count_bounded(words in prop::collection::vec("[a-c]{1,3}", 0..20), n in 1usize..5) {
            let text = words.join(" ");
            let s = shingle_set(&text, n, ShingleUnit::Word).unwrap();
            prop_assert!(s.len() <= words.len().saturating_sub(n - 1));
        }
    }
}
