//! `calibprune`: train tiny models, build calibration sets, prune, and
//! measure.
//!
//! Size flags default to the full protocol (128 × 2048-token sequences, 20
//! replicates, 5000 generated samples of 2048 tokens). `--preset desk` scales
//! these to n=32, L=128, 5 replicates, 512 generated samples of 256 tokens.
//! Any explicit flag wins over the preset.

use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use calibprune::calib::{
    load_calibration, load_corpus, multi_seed_sets, save_calibration, SamplingMode,
};
use calibprune::diagnostics::{
    self, corpus_similarity, eval_windows, minkpp_sequence, ShingleUnit,
};
use calibprune::experiment::{run_experiment, ExperimentConfig};
use calibprune::model::{load_weights, save_weights, ModelConfig};
use calibprune::prune::{
    prune_model, save_masks, ComparisonGroup, Method, OwlParams, PruneSpec, Sparsity,
};
use calibprune::selfgen::{
    generate_set, perplexity_filter, to_calibration_set, GeneratedSample, GenerationConfig,
    PerplexityScope,
};
use calibprune::trainer::{init_weights, train, TrainConfig};
use calibprune::{fixture, RngStream};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "calibprune",
    version,
    about = "Calibration-data workbench for post-training pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on a JSONL corpus.
    Train(TrainArgs),
    /// Draw calibration windows from a corpus.
    Sample(SampleArgs),
    /// Self-generate calibration samples from corpus prefixes.
    Generate(GenerateArgs),
    /// Drop the highest-perplexity generated samples.
    Filter(FilterArgs),
    /// Prune a model with a calibration set.
    Prune(PruneArgs),
    /// Perplexity of a model on a corpus.
    Eval(EvalArgs),
    /// Min-K%++ scores of corpus windows, one JSON line per window.
    Minkpp(MinkppArgs),
    /// MinHash n-gram similarity between two corpora.
    Similarity(SimilarityArgs),
    /// Run a multi-seed calibration experiment from a JSON config.
    Experiment(ExperimentArgs),
    /// Write a synthetic corpus.
    Fixture(FixtureArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

struct Sizes {
    n: usize,
    seqlen: usize,
    replicates: usize,
    n_gen: usize,
    gen_len: usize,
}

impl Preset {
    fn sizes(self) -> Sizes {
        match self {
            Preset::Full => Sizes {
                n: 128,
                seqlen: 2048,
                replicates: 20,
                n_gen: 5000,
                gen_len: 2048,
            },
            Preset::Desk => Sizes {
                n: 32,
                seqlen: 128,
                replicates: 5,
                n_gen: 512,
                gen_len: 256,
            },
        }
    }
}

#[derive(Args)]
struct PresetArg {
    /// Size preset; explicit size flags override it.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model config as JSON; defaults to the desk model.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Continue from existing weights instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    preset: PresetArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seqlen: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which replicate stream of the seed to draw from.
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    /// Join documents with BOS before windowing.
    #[arg(long)]
    concat: bool,
}

#[derive(Args)]
struct GenerationArgs {
    #[arg(long, default_value_t = 4)]
    prefix_len: usize,
    /// Generated sequence length including the prefix.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    top_p: f32,
    #[arg(long, default_value_t = 0.6)]
    temp: f32,
    #[arg(long, default_value_t = 1.2)]
    rep_penalty: f32,
    /// Score only generated tokens when computing filter perplexity.
    #[arg(long)]
    continuation_ppl: bool,
}

impl GenerationArgs {
    fn config(&self, sizes: &Sizes) -> GenerationConfig {
        GenerationConfig {
            prefix_len: self.prefix_len,
            max_len: self.max_len.unwrap_or(sizes.gen_len),
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temp,
            repetition_penalty: self.rep_penalty,
            scope: if self.continuation_ppl {
                PerplexityScope::Continuation
            } else {
                PerplexityScope::Full
            },
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus the prefixes are cut from.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    preset: PresetArg,
    #[arg(long)]
    n_gen: Option<usize>,
    #[command(flatten)]
    generation: GenerationArgs,
    /// Apply the perplexity filter before writing; 0 keeps everything.
    #[arg(long, default_value_t = 0.0)]
    filter_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FilterArgs {
    /// Self-generated calibration JSONL with perplexities.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    filter_rate: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Magnitude,
    Wanda,
    WandaDsnot,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    PerRow,
    PerLayer,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration JSONL; optional for magnitude pruning.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "wanda")]
    method: MethodArg,
    /// Unstructured ratio such as 0.5, or N:M such as 2:4.
    #[arg(long, default_value = "0.5")]
    sparsity: String,
    /// Outlier-weighted layer-wise sparsity (unstructured only).
    #[arg(long)]
    owl: bool,
    #[arg(long, default_value_t = 0.08)]
    owl_lambda: f64,
    #[arg(long, default_value_t = 5.0)]
    owl_m: f64,
    #[arg(long, value_enum, default_value = "per-row")]
    group: GroupArg,
    #[arg(long, default_value_t = 50)]
    max_cycles: usize,
    /// Also write the masks as run-length-encoded JSONL.
    #[arg(long)]
    masks_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Window length; defaults to the model's max_seq_len.
    #[arg(long)]
    seqlen: Option<usize>,
    /// Maximum number of windows.
    #[arg(long)]
    windows: Option<usize>,
}

#[derive(Args)]
struct MinkppArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus to window, or use --calib for prepared sequences.
    #[arg(long, conflicts_with = "calib")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    k: f64,
    #[arg(long)]
    seqlen: Option<usize>,
    #[arg(long)]
    windows: Option<usize>,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 3)]
    ngram: usize,
    #[arg(long, default_value = "word")]
    unit: String,
    #[arg(long, default_value_t = 128)]
    num_perms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute the exact Jaccard similarity.
    #[arg(long)]
    exact: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Apply preset sizes over the config's n, L, replicates and generation size.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    English,
    Code,
    Random,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, value_enum)]
    kind: FixtureKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    docs: usize,
    #[arg(long, default_value_t = 500)]
    doc_bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn label_of(path: &std::path::Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, label_of(&a.corpus))?;
    let weights = match (&a.init, &a.model_config) {
        (Some(p), _) => load_weights(p)?,
        (None, Some(p)) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            init_weights(serde_json::from_str::<ModelConfig>(&text)?, a.seed)?
        }
        (None, None) => init_weights(ModelConfig::desk(), a.seed)?,
    };
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let trained = train(&weights, &corpus, &cfg)?;
    save_weights(&trained, &a.out)?;
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let sizes = a.preset.preset.sizes();
    let corpus = load_corpus(&a.corpus, label_of(&a.corpus))?;
    let mode = if a.concat {
        SamplingMode::Concat
    } else {
        SamplingMode::Documents
    };
    let sets = multi_seed_sets(
        &corpus,
        a.n.unwrap_or(sizes.n),
        a.seqlen.unwrap_or(sizes.seqlen),
        a.seed,
        a.replicate + 1,
        mode,
    )?;
    save_calibration(&sets[a.replicate], &a.out)?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let sizes = a.preset.preset.sizes();
    let w = load_weights(&a.model)?;
    let corpus = load_corpus(&a.corpus, label_of(&a.corpus))?;
    let cfg = a.generation.config(&sizes);
    let samples = generate_set(
        &w,
        &corpus,
        a.n_gen.unwrap_or(sizes.n_gen),
        &cfg,
        &mut RngStream::new(a.seed, 0),
    )?;
    let kept = perplexity_filter(&samples, a.filter_rate)?;
    save_calibration(
        &to_calibration_set(&kept, a.seed, corpus.source_label()),
        &a.out,
    )?;
    Ok(())
}

fn cmd_filter(a: FilterArgs) -> Result<()> {
    let set = load_calibration(&a.input)?;
    let Some(ppl) = &set.perplexities else {
        bail!(
            "{} has no perplexities; filter needs self-generated samples",
            a.input.display()
        );
    };
    let samples: Vec<GeneratedSample> = set
        .sequences
        .iter()
        .zip(ppl)
        .map(|(ids, &perplexity)| GeneratedSample {
            ids: ids.clone(),
            prefix_len: 0,
            perplexity,
        })
        .collect();
    let kept = perplexity_filter(&samples, a.filter_rate)?;
    save_calibration(
        &to_calibration_set(&kept, set.seed, &set.source_label),
        &a.out,
    )?;
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let w = load_weights(&a.model)?;
    let method = match a.method {
        MethodArg::Magnitude => Method::Magnitude,
        MethodArg::Wanda => Method::Wanda,
        MethodArg::WandaDsnot => Method::WandaDsnot,
    };
    let mut spec = PruneSpec::new(method, a.sparsity.parse::<Sparsity>()?);
    spec.group = match a.group {
        GroupArg::PerRow => ComparisonGroup::PerRow,
        GroupArg::PerLayer => ComparisonGroup::PerLayer,
    };
    spec.dsnot_max_cycles = a.max_cycles;
    if a.owl {
        spec.owl = Some(OwlParams {
            lambda: a.owl_lambda,
            m_mult: a.owl_m,
        });
    }
    let calib = match &a.calib {
        Some(p) => load_calibration(p)?,
        None if !spec.needs_stats() => calibprune::calib::CalibrationSet {
            sequences: Vec::new(),
            provenance: calibprune::calib::Provenance::Sampled,
            seed: 0,
            source_label: String::new(),
            perplexities: None,
        },
        None => bail!("--calib is required for this pruning method"),
    };
    let out = prune_model(&w, &calib, &spec)?;
    save_weights(&out.weights, &a.out)?;
    if let Some(p) = &a.masks_out {
        save_masks(&out.masks, p)?;
    }
    let ratios: serde_json::Map<String, serde_json::Value> = out
        .plan
        .per_layer_ratio
        .iter()
        .map(|(l, r)| (l.to_string(), json!(r)))
        .collect();
    println!(
        "{}",
        json!({"sparsity": spec.sparsity.to_string(), "mean_sparsity": out.plan.weighted_mean(w.config()), "per_layer": ratios})
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let w = load_weights(&a.model)?;
    let corpus = load_corpus(&a.corpus, label_of(&a.corpus))?;
    let len = a.seqlen.unwrap_or(w.config().max_seq_len);
    let windows = eval_windows(&corpus, len, a.windows)?;
    let ppl = diagnostics::perplexity(&w, &windows)?;
    println!(
        "{}",
        json!({"perplexity": ppl, "windows": windows.len(), "seqlen": len})
    );
    Ok(())
}

fn cmd_minkpp(a: MinkppArgs) -> Result<()> {
    let w = load_weights(&a.model)?;
    let seqs = match (&a.corpus, &a.calib) {
        (Some(c), _) => {
            let corpus = load_corpus(c, label_of(c))?;
            eval_windows(
                &corpus,
                a.seqlen.unwrap_or(w.config().max_seq_len),
                a.windows,
            )?
        }
        (None, Some(p)) => load_calibration(p)?.sequences,
        (None, None) => bail!("pass --corpus or --calib"),
    };
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for s in &seqs {
        let score = minkpp_sequence(&w, s, a.k)?;
        writeln!(out, "{}", json!({"score": score.sequence_score, "k": a.k}))?;
    }
    Ok(())
}

fn cmd_similarity(a: SimilarityArgs) -> Result<()> {
    let ca = load_corpus(&a.a, label_of(&a.a))?;
    let cb = load_corpus(&a.b, label_of(&a.b))?;
    let unit: ShingleUnit = a.unit.parse()?;
    let report = corpus_similarity(&ca, &cb, a.ngram, unit, a.num_perms, a.seed, a.exact)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Exit code 1 for configuration errors, 2 when some cells failed.
fn cmd_experiment(a: ExperimentArgs) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(&a.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(p) = a.preset {
        let s = p.sizes();
        cfg.n = s.n;
        cfg.seq_len = s.seqlen;
        cfg.replicates = s.replicates;
        cfg.n_gen = s.n_gen;
        cfg.generation.max_len = s.gen_len;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    match run_experiment(&cfg) {
        Ok(report) => {
            print!("{}", calibprune::experiment::render_table(&report));
            if report.failed_cells() > 0 {
                eprintln!("{} cell(s) failed; see report.json", report.failed_cells());
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_fixture(a: FixtureArgs) -> Result<()> {
    let label = label_of(&a.out);
    let corpus = match a.kind {
        FixtureKind::English => fixture::english_corpus(a.docs, a.doc_bytes, a.seed, &label)?,
        FixtureKind::Code => fixture::code_corpus(a.docs, a.doc_bytes, a.seed, &label)?,
        FixtureKind::Random => fixture::random_byte_corpus(a.docs, a.doc_bytes, a.seed, &label)?,
    };
    corpus.save_jsonl(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Experiment(a) => return cmd_experiment(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Minkpp(a) => cmd_minkpp(a),
        Command::Similarity(a) => cmd_similarity(a),
        Command::Fixture(a) => cmd_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
