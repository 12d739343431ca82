//! End-to-end runs: oracle SFT bootstrap, self-contrastive pair generation,
//! token weighting, preference training and held-out evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use musc_core::confidence::{attach_weights_all, ConfidenceError};
use musc_core::constraint_lang::{
    sample_constraint_set, serialize_instruction, solve, Instruction, LangError, SolverConfig, SolverStyle,
    Vocab,
};
use musc_core::datagen::{build_dataset, derive_seed, DatagenError, PairSource, PreferencePair};
use musc_core::eval::{check_overlap, evaluate, heldout_instructions, EvalError, EvalReport};
use musc_core::lm::sft::{sft_train, SftExample, SftReport};
use musc_core::lm::{LmError, PolicyModel};
use musc_core::trainer::{train, MetricsRow, TrainError};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("oracle could not solve a sampled instruction: {0}")]
    Oracle(String),
}

/// Independent seed streams derived from the root seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Model = 1,
    OracleData = 2,
    Sft = 3,
    Pairs = 4,
    Train = 5,
    Eval = 6,
}

pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    derive_seed(root ^ 0xa5a5_0000_0000_0000, stage as u64)
}

/// Solved (instruction, response) examples for supervised bootstrapping.
pub fn oracle_corpus(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<SftExample>, PipelineError> {
    let root = stage_seed(cfg.seed, Stage::OracleData);
    let max_len = cfg.dropout.max_response_len as u32;
    (0..cfg.data.n_sft_examples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, i as u64));
            let set = sample_constraint_set(
                vocab,
                &mut rng,
                cfg.data.sft_min_constraints,
                cfg.data.sft_max_constraints,
                max_len,
                &cfg.sampler,
            )?;
            let solver = SolverConfig { max_len, style: SolverStyle::Compact, ..SolverConfig::default() };
            let resp =
                solve(&set, vocab, &mut rng, &solver).map_err(|e| PipelineError::Oracle(e.to_string()))?;
            let ins = Instruction::new(set)?;
            Ok(SftExample { prompt: serialize_instruction(&ins, vocab)?, response: resp.tokens().to_vec() })
        })
        .collect()
}

/// Fresh model trained on the oracle corpus.
pub fn bootstrap(cfg: &RunConfig, vocab: &Vocab) -> Result<(PolicyModel, SftReport), PipelineError> {
    let mut model_cfg = cfg.model;
    model_cfg.seed = stage_seed(cfg.seed, Stage::Model);
    let mut model = PolicyModel::new(model_cfg)?;
    let corpus = oracle_corpus(cfg, vocab)?;
    let sft_cfg = musc_core::lm::sft::SftConfig { seed: stage_seed(cfg.seed, Stage::Sft), ..cfg.sft };
    let report = sft_train(&mut model, &corpus, &sft_cfg)?;
    Ok((model, report))
}

pub fn heldout(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<Instruction>, PipelineError> {
    Ok(heldout_instructions(
        vocab,
        cfg.heldout.n_instructions,
        cfg.heldout.seed,
        cfg.heldout.min_constraints,
        cfg.heldout.max_constraints,
        cfg.dropout.max_response_len as u32,
        &cfg.sampler,
    )?)
}

/// Self-generated pairs from `model`, weighted with `model` as reference.
pub fn make_pairs(
    cfg: &RunConfig,
    vocab: &Vocab,
    model: &PolicyModel,
) -> Result<Vec<PreferencePair>, PipelineError> {
    let dropout =
        musc_core::datagen::DropoutConfig { seed: stage_seed(cfg.seed, Stage::Pairs), ..cfg.dropout };
    let src = PairSource::Sampled { n_pairs: cfg.data.n_pairs, sampler: cfg.sampler };
    let (pairs, summary) = build_dataset(model, &src, &dropout, vocab)?;
    log::info!("pairs: {}", summary.histogram());
    Ok(attach_weights_all(&pairs, model, vocab, &cfg.calibration)?)
}

/// Preference-trains a copy of `start` and evaluates it.
pub fn train_and_eval(
    cfg: &RunConfig,
    vocab: &Vocab,
    start: &PolicyModel,
    pairs: &[PreferencePair],
    heldout: &[Instruction],
) -> Result<(PolicyModel, Vec<MetricsRow>, EvalReport), PipelineError> {
    let mut model = start.clone_frozen();
    let train_cfg = musc_core::trainer::TrainConfig { seed: stage_seed(cfg.seed, Stage::Train), ..cfg.train };
    let rows = train(&mut model, pairs, vocab, &train_cfg)?;
    let (report, _) = evaluate(&model, heldout, vocab, &eval_cfg(cfg))?;
    Ok((model, rows, report))
}

pub fn eval_cfg(cfg: &RunConfig) -> musc_core::eval::EvalConfig {
    musc_core::eval::EvalConfig { seed: stage_seed(cfg.seed, Stage::Eval), ..cfg.eval }
}

/// One seed of the comparison between SFT alone, uniform-weight training
/// and token-weighted training on the same pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskOutcome {
    pub seed: u64,
    pub sft: EvalReport,
    pub weighted: EvalReport,
    pub uniform: EvalReport,
    pub weighted_metrics: Vec<MetricsRow>,
    pub uniform_metrics: Vec<MetricsRow>,
}

impl DeskOutcome {
    /// Token-weighted training beats SFT and matches or beats uniform
    /// weights, on both ISR and CSR.
    pub fn weighted_wins(&self) -> bool {
        self.weighted.isr > self.sft.isr
            && self.weighted.isr >= self.uniform.isr
            && self.weighted.csr > self.sft.csr
            && self.weighted.csr >= self.uniform.csr
    }
}

pub fn desk_experiment(cfg: &RunConfig) -> Result<DeskOutcome, PipelineError> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let (sft_model, _) = bootstrap(cfg, &vocab)?;
    let held = heldout(cfg, &vocab)?;
    let (sft_report, _) = evaluate(&sft_model, &held, &vocab, &eval_cfg(cfg))?;
    let pairs = make_pairs(cfg, &vocab, &sft_model)?;
    check_overlap(&pairs, &held)?;
    let (_, weighted_metrics, weighted) = train_and_eval(cfg, &vocab, &sft_model, &pairs, &held)?;
    let mut uniform_cfg = cfg.clone();
    uniform_cfg.train.loss.use_weights = false;
    let (_, uniform_metrics, uniform) = train_and_eval(&uniform_cfg, &vocab, &sft_model, &pairs, &held)?;
    Ok(DeskOutcome { seed: cfg.seed, sft: sft_report, weighted, uniform, weighted_metrics, uniform_metrics })
}

/// Mean of `f` over the first and the last `frac` of rows.
pub fn head_tail_means(rows: &[MetricsRow], frac: f64, f: fn(&MetricsRow) -> f64) -> (f64, f64) {
    let k = ((rows.len() as f64 * frac).ceil() as usize).max(1).min(rows.len());
    let mean = |s: &[MetricsRow]| s.iter().map(f).sum::<f64>() / s.len() as f64;
    (mean(&rows[..k]), mean(&rows[rows.len() - k..]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub csr: Option<f64>,
    pub isr: Option<f64>,
    pub psr: Option<f64>,
    pub error: Option<String>,
}

/// Full pipeline for every (alpha, seed) cell. The SFT bootstrap is shared
/// by all cells of a seed. Failures are recorded in the row and the sweep
/// continues.
pub fn sweep_alpha(cfg: &RunConfig, alphas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>, PipelineError> {
    let vocab = cfg.vocab()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let seed_cfg = RunConfig { seed, ..cfg.clone() };
        let boot = bootstrap(&seed_cfg, &vocab);
        let held = heldout(&seed_cfg, &vocab)?;
        let cells: Vec<SweepRow> = alphas
            .par_iter()
            .map(|&alpha| {
                let run = || -> Result<EvalReport, PipelineError> {
                    let (start, _) = boot.as_ref().map_err(|e| PipelineError::Oracle(e.to_string()))?;
                    let mut c = seed_cfg.clone();
                    c.dropout.alpha = alpha;
                    c.validate()?;
                    let pairs = make_pairs(&c, &vocab, start)?;
                    Ok(train_and_eval(&c, &vocab, start, &pairs, &held)?.2)
                };
                match run() {
                    Ok(r) => SweepRow {
                        alpha,
                        seed,
                        csr: Some(r.csr),
                        isr: Some(r.isr),
                        psr: Some(r.psr),
                        error: None,
                    },
                    Err(e) => {
                        SweepRow { alpha, seed, csr: None, isr: None, psr: None, error: Some(e.to_string()) }
                    }
                }
            })
            .collect();
        rows.extend(cells);
    }
    Ok(rows)
}
