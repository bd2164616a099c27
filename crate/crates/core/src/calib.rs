//! Corpus ingestion and calibration-set sampling.
//!
//! A calibration sequence is a contiguous window of exactly `L` tokens. By
//! default a document is chosen uniformly among those with at least `L`
//! tokens and the window start uniformly within it; shorter documents are
//! skipped. [`SamplingMode::Concat`] instead draws windows from all documents
//! joined with BOS separators, for corpora of short documents.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tokenizer::{self, TokenId, BOS};

pub const DEFAULT_REPLICATES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<String>,
    source_label: String,
}

impl Corpus {
    pub fn new(documents: Vec<String>, source_label: impl Into<String>) -> Result<Self> {
        let documents: Vec<String> = documents.into_iter().filter(|d| !d.is_empty()).collect();
        if documents.is_empty() {
            return Err(Error::invalid("corpus has no non-empty documents"));
        }
        Ok(Corpus {
            documents,
            source_label: source_label.into(),
        })
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn source_label(&self) -> &str {
        &self.source_label
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(String::len).sum()
    }

    /// All documents, each preceded by BOS.
    pub fn concatenated(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.total_tokens() + self.documents.len());
        for d in &self.documents {
            out.push(BOS);
            out.extend(tokenizer::encode(d, false));
        }
        out
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for d in &self.documents {
            serde_json::to_writer(&mut w, &serde_json::json!({ "text": d }))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads JSONL with a string `"text"` field per line. Blank lines and empty
/// texts are dropped; order is preserved.
pub fn load_corpus(path: impl AsRef<Path>, source_label: impl Into<String>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut documents = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::JsonLine {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let text =
            value
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::MissingField {
                    path: path.to_path_buf(),
                    line: lineno,
                    field: "text",
                })?;
        if !text.is_empty() {
            documents.push(text.to_string());
        }
    }
    Corpus::new(documents, source_label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    SelfGenerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Documents,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<TokenId>>,
    pub provenance: Provenance,
    pub seed: u64,
    pub source_label: String,
    /// Dense-model perplexity per sequence, present for self-generated sets.
    pub perplexities: Option<Vec<f32>>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct CalibRecord {
    ids: Vec<TokenId>,
    provenance: Provenance,
    seed: u64,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perplexity: Option<f32>,
}

pub fn save_calibration(set: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, ids) in set.sequences.iter().enumerate() {
        let rec = CalibRecord {
            ids: ids.clone(),
            provenance: set.provenance,
            seed: set.seed,
            source: set.source_label.clone(),
            perplexity: set.perplexities.as_ref().map(|p| p[i]),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CalibRecord = serde_json::from_str(&line).map_err(|e| Error::JsonLine {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let first = records.first().ok_or(Error::EmptyCalibration)?;
    let (provenance, seed, source_label) = (first.provenance, first.seed, first.source.clone());
    let perplexities = if records.iter().all(|r| r.perplexity.is_some()) {
        Some(records.iter().map(|r| r.perplexity.unwrap()).collect())
    } else {
        None
    };
    Ok(CalibrationSet {
        sequences: records.into_iter().map(|r| r.ids).collect(),
        provenance,
        seed,
        source_label,
        perplexities,
    })
}

/// Draws `n` windows of exactly `len` tokens.
pub fn sample_calibration(
    corpus: &Corpus,
    n: usize,
    len: usize,
    rng: &mut RngStream,
) -> Result<CalibrationSet> {
    sample_calibration_with(corpus, n, len, rng, SamplingMode::Documents)
}

pub fn sample_calibration_with(
    corpus: &Corpus,
    n: usize,
    len: usize,
    rng: &mut RngStream,
    mode: SamplingMode,
) -> Result<CalibrationSet> {
    if len == 0 {
        return Err(Error::invalid("calibration length must be positive"));
    }
    let sources: Vec<Vec<TokenId>> = match mode {
        SamplingMode::Documents => corpus
            .documents
            .iter()
            .filter(|d| d.len() >= len)
            .map(|d| tokenizer::encode(d, false))
            .collect(),
        SamplingMode::Concat => {
            let all = corpus.concatenated();
            if all.len() >= len {
                vec![all]
            } else {
                vec![]
            }
        }
    };
    Ok(CalibrationSet {
        sequences: sample_windows(&sources, n, len, rng)?,
        provenance: Provenance::Sampled,
        seed: rng.seed(),
        source_label: corpus.source_label.clone(),
        perplexities: None,
    })
}

/// `n` windows of `len` tokens from token sequences: a sequence is chosen
/// uniformly among those with at least `len` tokens, then a uniform start.
pub fn sample_windows(
    sources: &[Vec<TokenId>],
    n: usize,
    len: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<TokenId>>> {
    if len == 0 {
        return Err(Error::invalid("calibration length must be positive"));
    }
    let long: Vec<&Vec<TokenId>> = sources.iter().filter(|s| s.len() >= len).collect();
    if long.is_empty() {
        return Err(Error::NoLongDocument { need: len });
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let doc = long[rng.below(long.len())];
        let start = rng.below(doc.len() - len + 1);
        out.push(doc[start..start + len].to_vec());
    }
    Ok(out)
}

/// `replicates` independent calibration sets; replicate `i` draws from stream
/// `i` of `base_seed`.
pub fn multi_seed_sets(
    corpus: &Corpus,
    n: usize,
    len: usize,
    base_seed: u64,
    replicates: usize,
    mode: SamplingMode,
) -> Result<Vec<CalibrationSet>> {
    if replicates == 0 {
        return Err(Error::invalid("replicates must be >= 1"));
    }
    (0..replicates as u64)
        .map(|i| sample_calibration_with(corpus, n, len, &mut RngStream::new(base_seed, i), mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_drops_empty_texts() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"text\":\"a\"}\n{\"text\":\"\"}\n{\"text\":\"b\"}\n",
        );
        let c = load_corpus(&p, "x").unwrap();
        assert_eq!(c.documents(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn load_reports_missing_field_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"txt\":\"x\"}\n");
        match load_corpus(&p, "x").unwrap_err() {
            Error::MissingField { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "text");
            }
            e => panic!("unexpected {e}"),
        }
        let p = write(dir.path(), "d.jsonl", "{\"text\":\"ok\"}\n{oops\n");
        assert!(matches!(
            load_corpus(&p, "x"),
            Err(Error::JsonLine { line: 2, .. })
        ));
    }

    #[test]
    fn corpus_round_trip_keeps_count() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::new(vec!["one".into(), "two \"quoted\"\nline".into()], "x").unwrap();
        let p = dir.path().join("c.jsonl");
        c.save_jsonl(&p).unwrap();
        assert_eq!(load_corpus(&p, "x").unwrap(), c);
    }

    #[test]
    fn single_exact_document_is_forced() {
        let c = Corpus::new(vec!["0123456789".into()], "x").unwrap();
        let s = sample_calibration(&c, 1, 10, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(s.sequences, vec![tokenizer::encode("0123456789", false)]);
    }

    #[test]
    fn short_documents_are_rejected() {
        let c = Corpus::new(vec!["abc".into()], "x").unwrap();
        assert!(matches!(
            sample_calibration(&c, 1, 10, &mut RngStream::new(0, 0)),
            Err(Error::NoLongDocument { need: 10 })
        ));
        let s = sample_calibration_with(&c, 2, 4, &mut RngStream::new(0, 0), SamplingMode::Concat)
            .unwrap();
        assert_eq!(s.sequences[0], vec![BOS, 97, 98, 99]);
    }

    #[test]
    fn replicate_zero_matches_plain_sampling() {
        let c = Corpus::new(vec!["x".repeat(300), "y".repeat(50)], "x").unwrap();
        let sets = multi_seed_sets(&c, 4, 32, 11, 1, SamplingMode::Documents).unwrap();
        let plain = sample_calibration(&c, 4, 32, &mut RngStream::new(11, 0)).unwrap();
        assert_eq!(sets, vec![plain]);
        assert!(multi_seed_sets(&c, 4, 32, 11, 0, SamplingMode::Documents).is_err());
    }

    #[test]
    fn calibration_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = CalibrationSet {
            sequences: vec![vec![1, 2, 3], vec![4, 5, 6]],
            provenance: Provenance::SelfGenerated,
            seed: 9,
            source_label: "b".into(),
            perplexities: Some(vec![1.5, 2.5]),
        };
        let p = dir.path().join("cal.jsonl");
        save_calibration(&set, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "{\"ids\":[1,2,3],\"provenance\":\"self_generated\",\"seed\":9,\"source\":\"b\",\"perplexity\":1.5}"
        ));
        assert_eq!(load_calibration(&p).unwrap(), set);
    }
}
