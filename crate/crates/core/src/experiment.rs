//! Multi-seed calibration experiments: every calibration source × sparsity
//! setting × replicate is pruned and evaluated, and the per-cell perplexities
//! are aggregated into mean ± sample standard deviation.
//!
//! Replicate `r` of every source draws from stream `r` of the config seed, and
//! one calibration set per (source, replicate) is shared by all sparsity
//! settings. A failing cell is recorded and the run continues.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{
    load_corpus, sample_calibration_with, sample_windows, CalibrationSet, Corpus, SamplingMode,
};
use crate::diagnostics::{eval_windows, perplexity};
use crate::error::{Error, Result};
use crate::model::{load_weights, WeightContainer};
use crate::prune::{
    collect_stats, prune_with_stats, ComparisonGroup, Method, OwlParams, PruneSpec, Sparsity,
};
use crate::rng::RngStream;
use crate::selfgen::{
    generate_set, perplexity_filter, to_calibration_set, GenerationConfig, DEFAULT_FILTER_RATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Sampled,
    SelfGenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSource {
    pub label: String,
    pub path: PathBuf,
    pub mode: SourceMode,
    #[serde(default)]
    pub sampling: SamplingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSettings {
    pub method: Method,
    #[serde(default)]
    pub owl: Option<OwlParams>,
    pub sparsity: Vec<Sparsity>,
    #[serde(default)]
    pub group: ComparisonGroup,
    #[serde(default = "default_cycles")]
    pub dsnot_max_cycles: usize,
}

fn default_cycles() -> usize {
    crate::prune::DEFAULT_MAX_CYCLES
}

fn default_n_gen() -> usize {
    512
}

fn default_filter_rate() -> f64 {
    DEFAULT_FILTER_RATE
}

fn default_eval_windows() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model_path: PathBuf,
    pub calib_sources: Vec<CalibSource>,
    pub pruning: PruningSettings,
    /// Calibration sequences per replicate.
    pub n: usize,
    /// Tokens per calibration sequence.
    #[serde(alias = "L")]
    pub seq_len: usize,
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    pub eval_corpus: PathBuf,
    /// Number of evaluation windows of `seq_len` tokens.
    #[serde(default = "default_eval_windows")]
    pub eval_windows: usize,
    pub output_dir: PathBuf,
    /// Used by self-generated sources.
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default = "default_n_gen")]
    pub n_gen: usize,
    #[serde(default = "default_filter_rate")]
    pub filter_rate: f64,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.n == 0 || self.seq_len < 2 {
            return Err(Error::invalid("n must be >= 1 and seq_len >= 2"));
        }
        if self.calib_sources.is_empty() || self.pruning.sparsity.is_empty() {
            return Err(Error::invalid(
                "need at least one calibration source and one sparsity setting",
            ));
        }
        let labels: BTreeSet<&str> = self
            .calib_sources
            .iter()
            .map(|s| s.label.as_str())
            .collect();
        if labels.len() != self.calib_sources.len() {
            return Err(Error::invalid("calibration source labels must be unique"));
        }
        let paths = std::iter::once(&self.model_path)
            .chain(std::iter::once(&self.eval_corpus))
            .chain(self.calib_sources.iter().map(|s| &s.path));
        for p in paths {
            if !p.exists() {
                return Err(Error::invalid(format!(
                    "path does not exist: {}",
                    p.display()
                )));
            }
        }
        if self
            .calib_sources
            .iter()
            .any(|s| s.mode == SourceMode::SelfGenerated)
        {
            self.generation.validate()?;
            if !(0.0..1.0).contains(&self.filter_rate) {
                return Err(Error::invalid("filter_rate must be in [0, 1)"));
            }
        }
        Ok(())
    }

    fn spec(&self, sparsity: Sparsity) -> PruneSpec {
        PruneSpec {
            method: self.pruning.method,
            sparsity,
            owl: self.pruning.owl,
            group: self.pruning.group,
            dsnot_max_cycles: self.pruning.dsnot_max_cycles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub source: String,
    pub setting: String,
    pub replicate: usize,
    pub perplexity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub source: String,
    pub setting: String,
    /// Number of successful replicates.
    pub count: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (denominator `count − 1`); 0 for one replicate.
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRange {
    pub setting: String,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dense_perplexity: f64,
    pub sources: Vec<String>,
    pub settings: Vec<String>,
    pub replicates: usize,
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn aggregate(&self, source: &str, setting: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.source == source && a.setting == setting)
    }
}

/// Mean, sample standard deviation, min and max.
pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, std, min, max))
}

fn aggregate(cells: &[Cell], sources: &[String], settings: &[String]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for source in sources {
        for setting in settings {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| &c.source == source && &c.setting == setting)
                .filter_map(|c| c.perplexity)
                .collect();
            let s = summarize(&vals);
            out.push(Aggregate {
                source: source.clone(),
                setting: setting.clone(),
                count: vals.len(),
                mean: s.map(|s| s.0),
                std: s.map(|s| s.1),
                min: s.map(|s| s.2),
                max: s.map(|s| s.3),
            });
        }
    }
    out
}

/// Per setting, the spread between the best and worst source means.
pub fn report_range(report: &ExperimentReport) -> Result<Vec<SettingRange>> {
    if report.sources.len() < 2 {
        return Err(Error::invalid("a range needs at least two sources"));
    }
    report
        .settings
        .iter()
        .map(|setting| {
            let means: Vec<f64> = report
                .aggregates
                .iter()
                .filter(|a| &a.setting == setting)
                .filter_map(|a| a.mean)
                .collect();
            if means.len() < 2 {
                return Err(Error::invalid(format!(
                    "setting {setting} has fewer than two sources with results"
                )));
            }
            let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = means.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(SettingRange {
                setting: setting.clone(),
                range: max - min,
            })
        })
        .collect()
}

/// Calibration set for one (source, replicate).
fn build_calibration(
    w: &WeightContainer,
    cfg: &ExperimentConfig,
    source: &CalibSource,
    corpus: &Corpus,
    replicate: usize,
) -> Result<CalibrationSet> {
    let mut rng = RngStream::new(cfg.seed, replicate as u64);
    match source.mode {
        SourceMode::Sampled => {
            sample_calibration_with(corpus, cfg.n, cfg.seq_len, &mut rng, source.sampling)
        }
        SourceMode::SelfGenerated => {
            let samples = generate_set(w, corpus, cfg.n_gen, &cfg.generation, &mut rng)?;
            let kept = perplexity_filter(&samples, cfg.filter_rate)?;
            let pool = to_calibration_set(&kept, cfg.seed, &source.label);
            let mut set = pool.clone();
            set.sequences = sample_windows(
                &pool.sequences,
                cfg.n,
                cfg.seq_len,
                &mut rng.derive(u64::MAX),
            )?;
            set.perplexities = None;
            Ok(set)
        }
    }
}

/// Runs every cell. Configuration problems are errors; failures inside a cell
/// are recorded in the report.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    w: &WeightContainer,
) -> Result<ExperimentReport> {
    let eval_corpus = load_corpus(&cfg.eval_corpus, "eval")?;
    let corpora: Vec<Corpus> = cfg
        .calib_sources
        .iter()
        .map(|s| load_corpus(&s.path, s.label.clone()))
        .collect::<Result<_>>()?;
    let eval_len = cfg.seq_len.min(w.config().max_seq_len);
    let eval = eval_windows(&eval_corpus, eval_len, Some(cfg.eval_windows))?;
    let dense_perplexity = f64::from(perplexity(w, &eval)?);

    let sources: Vec<String> = cfg.calib_sources.iter().map(|s| s.label.clone()).collect();
    let settings: Vec<String> = cfg
        .pruning
        .sparsity
        .iter()
        .map(Sparsity::to_string)
        .collect();
    let needs_stats = cfg
        .pruning
        .sparsity
        .iter()
        .any(|&s| cfg.spec(s).needs_stats());
    let needs_gram = cfg.spec(cfg.pruning.sparsity[0]).needs_gram();

    let mut cells = Vec::new();
    for (source, corpus) in cfg.calib_sources.iter().zip(&corpora) {
        for r in 0..cfg.replicates {
            let prepared = build_calibration(w, cfg, source, corpus, r).and_then(|calib| {
                if needs_stats {
                    collect_stats(w, &calib, needs_gram).map(Some)
                } else {
                    Ok(None)
                }
            });
            for (&sparsity, setting) in cfg.pruning.sparsity.iter().zip(&settings) {
                let result = prepared
                    .as_ref()
                    .map_err(|e| e.to_string())
                    .and_then(|stats| {
                        prune_with_stats(w, stats.as_ref(), &cfg.spec(sparsity))
                            .and_then(|out| perplexity(&out.weights, &eval))
                            .map_err(|e| e.to_string())
                    });
                log::info!("{} / {setting} / replicate {r}: {result:?}", source.label);
                let (perplexity, error) = match result {
                    Ok(p) => (Some(f64::from(p)), None),
                    Err(e) => (None, Some(e)),
                };
                cells.push(Cell {
                    source: source.label.clone(),
                    setting: setting.clone(),
                    replicate: r,
                    perplexity,
                    error,
                });
            }
        }
    }
    let aggregates = aggregate(&cells, &sources, &settings);
    Ok(ExperimentReport {
        dense_perplexity,
        sources,
        settings,
        replicates: cfg.replicates,
        cells,
        aggregates,
    })
}

/// Loads the model, runs the experiment and writes `report.json` and
/// `report.txt` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let w = load_weights(&cfg.model_path)?;
    let report = run_experiment_with(cfg, &w)?;
    write_report(&report, &cfg.output_dir)?;
    Ok(report)
}

pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report)? + "\n";
    let jp = dir.join("report.json");
    std::fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    let tp = dir.join("report.txt");
    std::fs::write(&tp, render_table(report)).map_err(|e| Error::io(&tp, e))?;
    Ok(())
}

/// Aligned `mean±std` table, one row per source and one column per setting.
pub fn render_table(report: &ExperimentReport) -> String {
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("source".to_string())
        .chain(report.settings.iter().cloned())
        .collect()];
    for source in &report.sources {
        let mut row = vec![source.clone()];
        for setting in &report.settings {
            let cell = match report.aggregate(source, setting) {
                Some(Aggregate {
                    mean: Some(m),
                    std: Some(s),
                    count,
                    ..
                }) if *count == report.replicates => format!("{m:.3}±{s:.3}"),
                Some(Aggregate {
                    mean: Some(m),
                    std: Some(s),
                    count,
                    ..
                }) => format!("{m:.3}±{s:.3} (n={count})"),
                _ => "failed".to_string(),
            };
            row.push(cell);
        }
        rows.push(row);
    }
    if let Ok(ranges) = report_range(report) {
        let mut row = vec!["range".to_string()];
        for setting in &report.settings {
            row.push(
                ranges
                    .iter()
                    .find(|r| &r.setting == setting)
                    .map(|r| format!("{:.3}", r.range))
                    .unwrap_or_default(),
            );
        }
        rows.push(row);
    }
    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("dense perplexity: {:.3}\n", report.dense_perplexity);
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(v, &w)| format!("{v:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
