//! Subcommands of the `musc` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use musc_core::confidence::{attach_weights_all, Metric};
use musc_core::datagen::{build_dataset, dataset_hash, read_dataset, write_dataset, PairSource, Scheme};
use musc_core::eval::{compare, delta_text, evaluate, read_report, summary_text, write_report};
use musc_core::lm::{self, CheckpointMeta, PolicyModel};
use musc_core::losses::Method;
use musc_core::trainer::{export_metrics, train, TrainConfig};
use musc_llm_client::{build_nl_pairs, ChatClient, NlPairOptions, PromptTemplateSet};

use crate::config::{ConfigError, RunConfig};
use crate::pipeline::{self, head_tail_means, stage_seed, Stage};

#[derive(Debug, Parser)]
#[command(
    name = "musc",
    version,
    about = "Self-contrastive preference training on a synthetic constraint language"
)]
pub struct Cli {
    /// TOML run configuration. Keys left out take the `paper` preset values;
    /// without a file the desk configuration is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration as TOML.
    ShowConfig {
        /// Print a named preset instead of the effective configuration.
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Train a fresh model on oracle-solved instructions.
    Sft {
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a preference dataset.
    GenData(GenDataArgs),
    /// Compute token weights for a dataset with a reference checkpoint.
    AttachWeights(AttachArgs),
    /// Preference-train a checkpoint on a weighted dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out instruction set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report file (JSON lines) to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Difference `b - a` of two evaluation reports.
    Compare { a: PathBuf, b: PathBuf },
    /// Full pipeline for every dropout rate and seed.
    SweepAlpha {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// CSV table to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// SFT alone vs uniform-weight vs token-weighted training, per seed.
    Desk {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// JSON file with the per-seed outcomes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the tokens and weights of one pair.
    WeightsInspect {
        #[arg(long)]
        data: PathBuf,
        /// 0-based record index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Sample constraint sets and answer them with the checkpoint.
    Selfinst,
    /// Instructions from a file of token arrays, answered with the checkpoint.
    PreinstFile,
    /// Natural-language instructions, one per line, sent to the endpoint.
    PreinstEndpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Dropout,
    Negate,
    Substitute,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Dropout => Scheme::Dropout,
            SchemeArg::Negate => Scheme::Negate,
            SchemeArg::Substitute => Scheme::Substitute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Entropy,
    Perplexity,
    Pmi,
    Kldiv,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Entropy => Metric::Entropy,
            MetricArg::Perplexity => Metric::Perplexity,
            MetricArg::Pmi => Metric::Pmi,
            MetricArg::Kldiv => Metric::Kldiv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Dpo,
    Tdpo,
    Simpo,
    Ipo,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dpo => Method::Dpo,
            MethodArg::Tdpo => Method::Tdpo,
            MethodArg::Simpo => Method::Simpo,
            MethodArg::Ipo => Method::Ipo,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "selfinst")]
    pub mode: Mode,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Pairs to emit in `selfinst` mode; defaults to `data.n_pairs`.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Policy checkpoint answering the instructions (not used with the endpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Instruction file for the `preinst-*` modes.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttachArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen reference checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Use each response's own uncertainty without the cross-instruction ratio.
    #[arg(long)]
    pub no_calib: bool,
    /// Output dataset; defaults to overwriting `--data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Starting checkpoint; its frozen copy is the reference model.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Checkpoint directory to write; the metrics go to `<out>.metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Uniform token weights.
    #[arg(long)]
    pub no_weights: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit status: 1 for usage and configuration problems, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Written next to every output as `<output>.manifest.json`.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    config_snapshot: String,
    dataset_hash: Option<String>,
    inputs: Vec<String>,
    output: String,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(
    command: &str,
    cfg: &RunConfig,
    dataset: Option<&Path>,
    inputs: &[&Path],
    output: &Path,
) -> Result<(), CliError> {
    let snapshot = sibling(output, ".config.toml");
    std::fs::write(&snapshot, cfg.to_toml()).map_err(rt)?;
    let dataset_hash = match dataset {
        Some(p) => Some(dataset_hash(p).map_err(rt)?),
        None => None,
    };
    let m = Manifest {
        command,
        config_hash: cfg.hash(),
        config_snapshot: snapshot.display().to_string(),
        dataset_hash,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        output: output.display().to_string(),
    };
    let text = serde_json::to_string_pretty(&m).map_err(rt)?;
    std::fs::write(sibling(output, ".manifest.json"), text).map_err(rt)?;
    Ok(())
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<PolicyModel, CliError> {
    let (model, _) = lm::load(path).map_err(rt)?;
    let vocab = cfg.vocab()?;
    if model.config().vocab_size != vocab.size() {
        return Err(CliError::Config(ConfigError::Invalid(format!(
            "checkpoint has {} tokens but the configured vocabulary has {}",
            model.config().vocab_size,
            vocab.size()
        ))));
    }
    Ok(model)
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path, CliError> {
    opt.as_deref().ok_or_else(|| CliError::Usage(format!("--{flag} is required with --mode {mode}")))
}

/// Runs one command and returns the text to print on stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = load_config(cli)?;
    let vocab = cfg.vocab()?;
    let mut out = String::new();
    match &cli.command {
        Command::ShowConfig { preset } => {
            let shown = match preset {
                Some(Preset::Paper) => RunConfig::default(),
                Some(Preset::Desk) => RunConfig::desk(),
                None => cfg,
            };
            out.push_str(&shown.to_toml());
        }
        Command::Sft { out: dir } => {
            let (model, report) = pipeline::bootstrap(&cfg, &vocab).map_err(rt)?;
            let meta = CheckpointMeta::for_model(
                &model,
                report.step_losses.len(),
                stage_seed(cfg.seed, Stage::Sft),
                None,
            );
            lm::save(&model, &meta, dir).map_err(rt)?;
            write_manifest("sft", &cfg, None, &[], dir)?;
            let _ = writeln!(
                out,
                "sft: {} steps, final epoch nll {:.4}, checkpoint {}",
                report.step_losses.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                model.checkpoint_id()
            );
        }
        Command::GenData(a) => {
            if let Some(s) = a.scheme {
                cfg.dropout.scheme = s.into();
            }
            if let Some(alpha) = a.alpha {
                cfg.dropout.alpha = alpha;
            }
            cfg.validate()?;
            let dropout =
                musc_core::datagen::DropoutConfig { seed: stage_seed(cfg.seed, Stage::Pairs), ..cfg.dropout };
            match a.mode {
                Mode::Selfinst | Mode::PreinstFile => {
                    let mode = if a.mode == Mode::Selfinst { "selfinst" } else { "preinst-file" };
                    let ckpt = require(&a.checkpoint, "checkpoint", mode)?;
                    let model = load_checkpoint(ckpt, &cfg)?;
                    let source = match a.mode {
                        Mode::Selfinst => {
                            let n_pairs = a.n.unwrap_or(cfg.data.n_pairs);
                            PairSource::Sampled { n_pairs, sampler: cfg.sampler }
                        }
                        _ => PairSource::File(require(&a.input, "input", mode)?.to_path_buf()),
                    };
                    let (pairs, summary) = build_dataset(&model, &source, &dropout, &vocab).map_err(rt)?;
                    write_dataset(&pairs, &a.out, &vocab).map_err(rt)?;
                    let mut inputs = vec![ckpt];
                    inputs.extend(a.input.as_deref());
                    write_manifest("gen-data", &cfg, Some(&a.out), &inputs, &a.out)?;
                    let _ = writeln!(out, "{}", summary.histogram());
                }
                Mode::PreinstEndpoint => {
                    let input = require(&a.input, "input", "preinst-endpoint")?;
                    let client = ChatClient::from_env(cfg.endpoint.clone()).map_err(|e| match e {
                        musc_llm_client::ClientError::MissingKey(_)
                        | musc_llm_client::ClientError::Config(_) => {
                            CliError::Config(ConfigError::Invalid(e.to_string()))
                        }
                        other => rt(other),
                    })?;
                    let opts = NlPairOptions {
                        alpha: dropout.alpha,
                        scheme: dropout.scheme,
                        min_constraints: dropout.min_constraints,
                        max_constraints: dropout.max_constraints,
                        seed: dropout.seed,
                    };
                    let runtime = tokio::runtime::Runtime::new().map_err(rt)?;
                    let summary = runtime
                        .block_on(build_nl_pairs(
                            &client,
                            &PromptTemplateSet::default(),
                            input,
                            &a.out,
                            &opts,
                        ))
                        .map_err(rt)?;
                    write_manifest("gen-data", &cfg, Some(&a.out), &[input], &a.out)?;
                    let _ = writeln!(
                        out,
                        "records {} emitted {} rejected {:?} failures {} (http attempts {}, cache hits {})",
                        summary.records,
                        summary.emitted,
                        summary.rejected,
                        summary.failures.len(),
                        client.stats().attempts(),
                        client.stats().cache_hits()
                    );
                }
            }
        }
        Command::AttachWeights(a) => {
            if let Some(m) = a.metric {
                cfg.calibration.metric = m.into();
            }
            if let Some(g) = a.gamma {
                cfg.calibration.gamma = g;
            }
            if a.no_calib {
                cfg.calibration.calibrated = false;
            }
            cfg.validate()?;
            let model = load_checkpoint(&a.checkpoint, &cfg)?;
            let pairs = read_dataset(&a.data, &vocab).map_err(rt)?;
            let weighted = attach_weights_all(&pairs, &model, &vocab, &cfg.calibration).map_err(rt)?;
            let dest = a.out.as_deref().unwrap_or(&a.data);
            write_dataset(&weighted, dest, &vocab).map_err(rt)?;
            write_manifest("attach-weights", &cfg, Some(dest), &[&a.data, &a.checkpoint], dest)?;
            let _ = writeln!(out, "weighted {} pairs with {}", weighted.len(), cfg.calibration.metric.name());
        }
        Command::Train(a) => {
            if let Some(p) = a.preset {
                let seed = cfg.train.seed;
                let loss = cfg.train.loss;
                cfg.train = match p {
                    Preset::Paper => TrainConfig::paper(),
                    Preset::Desk => TrainConfig::desk(),
                };
                cfg.train.seed = seed;
                cfg.train.loss = loss;
            }
            if let Some(m) = a.method {
                let use_weights = cfg.train.loss.use_weights;
                cfg.train.loss = musc_core::losses::LossConfig::for_method(m.into());
                cfg.train.loss.use_weights = use_weights;
            }
            if a.no_weights {
                cfg.train.loss.use_weights = false;
            }
            cfg.validate()?;
            let mut model = load_checkpoint(&a.checkpoint, &cfg)?;
            let pairs = read_dataset(&a.data, &vocab).map_err(rt)?;
            let train_cfg = TrainConfig { seed: stage_seed(cfg.seed, Stage::Train), ..cfg.train };
            let rows = train(&mut model, &pairs, &vocab, &train_cfg).map_err(rt)?;
            let hash = dataset_hash(&a.data).map_err(rt)?;
            let meta = CheckpointMeta::for_model(&model, rows.len(), train_cfg.seed, Some(hash));
            lm::save(&model, &meta, &a.out).map_err(rt)?;
            let metrics = sibling(&a.out, ".metrics.csv");
            export_metrics(&rows, &metrics).map_err(rt)?;
            write_manifest("train", &cfg, Some(&a.data), &[&a.data, &a.checkpoint], &a.out)?;
            let (head, tail) = head_tail_means(&rows, 0.1, |r| r.reward_margin);
            let _ = writeln!(
                out,
                "{} steps, loss {:.4} -> {:.4}, mean margin first 10% {head:.4}, last 10% {tail:.4}; metrics in {}",
                rows.len(),
                rows.first().map_or(f64::NAN, |r| r.loss),
                rows.last().map_or(f64::NAN, |r| r.loss),
                metrics.display()
            );
        }
        Command::Eval { checkpoint, out: report_path } => {
            let model = load_checkpoint(checkpoint, &cfg)?;
            let held = pipeline::heldout(&cfg, &vocab).map_err(rt)?;
            let (report, results) = evaluate(&model, &held, &vocab, &pipeline::eval_cfg(&cfg)).map_err(rt)?;
            write_report(&report, &results, report_path).map_err(rt)?;
            write_manifest("eval", &cfg, None, &[checkpoint], report_path)?;
            out.push_str(&summary_text(&report));
        }
        Command::Compare { a, b } => {
            let (ra, _) = read_report(a).map_err(rt)?;
            let (rb, _) = read_report(b).map_err(rt)?;
            out.push_str(&delta_text(&compare(&ra, &rb).map_err(rt)?));
        }
        Command::SweepAlpha { alphas, seeds, out: table } => {
            if alphas.is_empty() || seeds.is_empty() {
                return Err(CliError::Usage("--alphas and --seeds must be non-empty".into()));
            }
            cfg.validate()?;
            let rows = pipeline::sweep_alpha(&cfg, alphas, seeds).map_err(rt)?;
            let mut w = csv::Writer::from_path(table).map_err(rt)?;
            for r in &rows {
                w.serialize(r).map_err(rt)?;
            }
            w.flush().map_err(rt)?;
            write_manifest("sweep-alpha", &cfg, None, &[], table)?;
            let _ = writeln!(out, "alpha  seed     CSR     ISR     PSR");
            let f = |x: Option<f64>| x.map_or("     -".to_string(), |v| format!("{v:.4}"));
            for r in &rows {
                let _ = write!(out, "{:>5} {:>5}  {}  {}  {}", r.alpha, r.seed, f(r.csr), f(r.isr), f(r.psr));
                if let Some(e) = &r.error {
                    let _ = write!(out, "  error: {e}");
                }
                out.push('\n');
            }
        }
        Command::Desk { seeds, out: path } => {
            cfg.validate()?;
            let mut outcomes = Vec::new();
            let _ = writeln!(out, "seed   arm        ISR     CSR     PSR");
            for &seed in seeds {
                let c = RunConfig { seed, ..cfg.clone() };
                let o = pipeline::desk_experiment(&c).map_err(rt)?;
                for (arm, r) in [("sft", &o.sft), ("uniform", &o.uniform), ("weighted", &o.weighted)] {
                    let _ = writeln!(out, "{seed:>4}   {arm:<9} {:.4}  {:.4}  {:.4}", r.isr, r.csr, r.psr);
                }
                let _ = writeln!(out, "{seed:>4}   weighted wins: {}", o.weighted_wins());
                outcomes.push(o);
            }
            let text = serde_json::to_string_pretty(&outcomes).map_err(rt)?;
            std::fs::write(path, text).map_err(rt)?;
            write_manifest("desk", &cfg, None, &[], path)?;
        }
        Command::WeightsInspect { data, index } => {
            let pairs = read_dataset(data, &vocab).map_err(rt)?;
            let p = pairs.get(*index).ok_or_else(|| {
                CliError::Usage(format!("index {index} out of range, dataset has {} pairs", pairs.len()))
            })?;
            let _ = writeln!(out, "dropped constraints (1-based): {:?}", p.dropped_indices);
            let _ = writeln!(out, "metric: {}", p.provenance.metric.as_deref().unwrap_or("none"));
            let sides = [
                ("chosen", p.chosen_response.tokens(), p.weights.as_ref().map(|w| &w.chosen)),
                ("rejected", p.rejected_response.tokens(), p.weights.as_ref().map(|w| &w.rejected)),
            ];
            for (name, tokens, weights) in sides {
                let _ = writeln!(out, "{name}:");
                for (i, &t) in tokens.iter().enumerate() {
                    let w = weights.and_then(|w| w.get(i)).map_or("-".to_string(), |w| format!("{w:.4}"));
                    let _ = writeln!(out, "  {:>3}  {:<6} {w}", i, vocab.render(&[t]));
                }
            }
        }
    }
    Ok(out)
}
