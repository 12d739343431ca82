//! Constraint-aware preference pairs.
//!
//! A pair contrasts a response generated for the full constraint set with a
//! response generated, by the same checkpoint, for a corrupted copy of it:
//! non-first constraints dropped (the default), negated, or substituted.

mod io;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::TokenWeights;
use crate::constraint_lang::{
    negate, parse_instruction, sample_constraint_set, satisfiable, serialize_instruction, substitute,
    AtomicConstraint, Instruction, LangError, Response, SamplerConfig, Token, Vocab, EOS,
};
use crate::lm::{sample, Decode, LmError, PolicyModel};

pub use io::{dataset_hash, read_dataset, read_records, write_dataset, write_records, PairRecord, Payload};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("need at least 2 constraints to drop from, got {0}")]
    TooFewToDrop(usize),
    #[error("invalid dropout config: {0}")]
    Config(String),
    #[error("requested zero pairs")]
    NoPairsRequested,
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Dropout,
    Negate,
    Substitute,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dropout" => Ok(Scheme::Dropout),
            "negate" => Ok(Scheme::Negate),
            "substitute" => Ok(Scheme::Substitute),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub alpha: f64,
    pub scheme: Scheme,
    pub min_constraints: usize,
    pub max_constraints: usize,
    pub temperature: f64,
    pub max_response_len: usize,
    pub seed: u64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            scheme: Scheme::Dropout,
            min_constraints: 3,
            max_constraints: 10,
            temperature: 0.5,
            max_response_len: 12,
            seed: 0,
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if self.min_constraints < 2 {
            return bad(format!("min_constraints must be >= 2, got {}", self.min_constraints));
        }
        if self.max_constraints < self.min_constraints {
            return bad("max_constraints must be >= min_constraints".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_response_len == 0 {
            return bad("max_response_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Checkpoint that generated the responses (or endpoint model name).
    pub checkpoint_id: String,
    /// Confidence metric used for the token weights, once attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub chosen_instruction: Instruction,
    pub chosen_response: Response,
    pub rejected_instruction: Instruction,
    pub rejected_response: Response,
    /// 1-based positions of the corrupted constraints in the chosen list.
    pub dropped_indices: Vec<usize>,
    pub scheme: Scheme,
    pub weights: Option<TokenWeights>,
    pub provenance: Provenance,
}

impl PreferencePair {
    /// Checks every structural invariant a pair must satisfy.
    pub fn validate(&self, cfg: &DropoutConfig) -> Result<(), String> {
        let n = self.chosen_instruction.len();
        if n < cfg.min_constraints || n > cfg.max_constraints {
            return Err(format!(
                "{n} constraints outside [{}, {}]",
                cfg.min_constraints, cfg.max_constraints
            ));
        }
        if self.chosen_response == self.rejected_response {
            return Err("identical responses".into());
        }
        let k = self.dropped_indices.len();
        if k == 0 || k > n - 1 {
            return Err(format!("{k} corrupted constraints out of {n}"));
        }
        if self.dropped_indices.contains(&1) {
            return Err("first constraint corrupted".into());
        }
        if !self.dropped_indices.windows(2).all(|w| w[0] < w[1])
            || self.dropped_indices.iter().any(|&i| i > n)
        {
            return Err(format!("bad dropped indices {:?}", self.dropped_indices));
        }
        let chosen = self.chosen_instruction.constraints();
        let rejected = self.rejected_instruction.constraints();
        match self.scheme {
            Scheme::Dropout => {
                let expect: Vec<_> = chosen
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !self.dropped_indices.contains(&(i + 1)))
                    .map(|(_, c)| *c)
                    .collect();
                if rejected != expect.as_slice() {
                    return Err("rejected constraints are not the kept subsequence".into());
                }
            }
            Scheme::Negate | Scheme::Substitute => {
                if rejected.len() != n || rejected[0] != chosen[0] {
                    return Err("noised instruction must keep length and first constraint".into());
                }
            }
        }
        if let Some(w) = &self.weights {
            if w.chosen.len() != self.chosen_response.tokens().len()
                || w.rejected.len() != self.rejected_response.tokens().len()
            {
                return Err("weight lengths differ from response lengths".into());
            }
        }
        Ok(())
    }
}

/// Why a candidate did not become a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    TooFew,
    TooMany,
    UnsatNoised,
    IdenticalResponses,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::TooFew => "too_few",
            Rejection::TooMany => "too_many",
            Rejection::UnsatNoised => "unsat_noised",
            Rejection::IdenticalResponses => "identical_responses",
        }
    }
}

/// Number of constraints to corrupt: `clamp(round_half_up(alpha·n), 1, n−1)`.
pub fn dropout_count(n: usize, alpha: f64) -> usize {
    assert!(n >= 2);
    // the epsilon keeps exact halves such as 0.3·5 from rounding down
    let k = (alpha * n as f64 + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, n - 1)
}

/// Picks `dropout_count(n, alpha)` constraints uniformly among positions
/// 2..=n (1-based) and removes them. Returns the kept constraints in order
/// and the sorted 1-based indices that were removed.
pub fn constraint_dropout<R: Rng + ?Sized>(
    constraints: &[AtomicConstraint],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<AtomicConstraint>, Vec<usize>), DatagenError> {
    let dropped = dropout_indices(constraints.len(), alpha, rng)?;
    let kept = constraints
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(&(i + 1)))
        .map(|(_, c)| *c)
        .collect();
    Ok((kept, dropped))
}

/// Sorted 1-based positions to corrupt among `n` constraints: a uniform
/// subset of size `dropout_count(n, alpha)` drawn from positions 2..=n.
pub fn dropout_indices<R: Rng + ?Sized>(
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<usize>, DatagenError> {
    if n < 2 {
        return Err(DatagenError::TooFewToDrop(n));
    }
    let k = dropout_count(n, alpha);
    let mut picked: Vec<usize> = index::sample(rng, n - 1, k).into_iter().map(|i| i + 2).collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn recombine(constraints: &[AtomicConstraint]) -> Result<Instruction, DatagenError> {
    Ok(Instruction::new(constraints.to_vec())?)
}

/// Tokens a response may contain: letters and the end marker.
pub fn response_alphabet(vocab: &Vocab) -> Vec<Token> {
    let mut a: Vec<Token> = vocab.letters().collect();
    a.push(EOS);
    a
}

/// Samples a response for `instruction` with temperature-scaled logits,
/// restricted to the response alphabet.
pub fn generate_response<R: Rng + ?Sized>(
    model: &PolicyModel,
    instruction: &Instruction,
    vocab: &Vocab,
    decode: Decode,
    rng: &mut R,
    max_len: usize,
) -> Result<Response, DatagenError> {
    let prefix = serialize_instruction(instruction, vocab)?;
    // room for max_len letters plus the end marker; a response still open
    // after max_len letters is truncated there and left unterminated
    let mut tokens = sample(model, &prefix, decode, rng, max_len + 1, Some(&response_alphabet(vocab)))?;
    if tokens.last() != Some(&EOS) {
        tokens.truncate(max_len);
    }
    Ok(Response::from_tokens(tokens, vocab)?)
}

/// Builds one pair from a constraint set, or reports why it was filtered.
pub fn build_pair<R: Rng + ?Sized>(
    model: &PolicyModel,
    constraints: &[AtomicConstraint],
    cfg: &DropoutConfig,
    vocab: &Vocab,
    rng: &mut R,
    seed: u64,
    source: &str,
) -> Result<Result<PreferencePair, Rejection>, DatagenError> {
    let n = constraints.len();
    if n < cfg.min_constraints {
        return Ok(Err(Rejection::TooFew));
    }
    if n > cfg.max_constraints {
        return Ok(Err(Rejection::TooMany));
    }
    let corrupted = dropout_indices(n, cfg.alpha, rng)?;
    let noised: Vec<AtomicConstraint> = match cfg.scheme {
        Scheme::Dropout => constraints
            .iter()
            .enumerate()
            .filter(|(i, _)| !corrupted.contains(&(i + 1)))
            .map(|(_, c)| *c)
            .collect(),
        Scheme::Negate | Scheme::Substitute => {
            let mut out = constraints.to_vec();
            for &i in &corrupted {
                out[i - 1] = match cfg.scheme {
                    Scheme::Negate => negate(&out[i - 1]),
                    _ => substitute(&out[i - 1], vocab, rng),
                };
            }
            out
        }
    };
    if !satisfiable(&noised, vocab, cfg.max_response_len as u32) {
        return Ok(Err(Rejection::UnsatNoised));
    }
    let chosen_instruction = recombine(constraints)?;
    let rejected_instruction = recombine(&noised)?;
    let decode = Decode::Temperature { temperature: cfg.temperature };
    let chosen_response =
        generate_response(model, &chosen_instruction, vocab, decode, rng, cfg.max_response_len)?;
    let rejected_response =
        generate_response(model, &rejected_instruction, vocab, decode, rng, cfg.max_response_len)?;
    if chosen_response == rejected_response {
        return Ok(Err(Rejection::IdenticalResponses));
    }
    Ok(Ok(PreferencePair {
        chosen_instruction,
        chosen_response,
        rejected_instruction,
        rejected_response,
        dropped_indices: corrupted,
        scheme: cfg.scheme,
        weights: None,
        provenance: Provenance {
            seed,
            checkpoint_id: model.checkpoint_id(),
            metric: None,
            source: source.to_string(),
            endpoint: None,
        },
    }))
}

/// Where constraint sets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSource {
    /// Freshly sampled constraint sets; stops once `n_pairs` are accepted.
    Sampled { n_pairs: usize, sampler: SamplerConfig },
    /// One canonical token-id list (JSON array) per line; each line is
    /// parsed into its atomic constraints and tried once.
    File(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub attempted: usize,
    pub emitted: usize,
    pub rejected: BTreeMap<Rejection, usize>,
}

impl DatasetSummary {
    fn record(&mut self, outcome: &Result<PreferencePair, Rejection>) {
        self.attempted += 1;
        match outcome {
            Ok(_) => self.emitted += 1,
            Err(r) => *self.rejected.entry(*r).or_default() += 1,
        }
    }

    pub fn histogram(&self) -> String {
        let mut s = format!("attempted {} emitted {}", self.attempted, self.emitted);
        for (r, n) in &self.rejected {
            s.push_str(&format!(" {}={n}", r.as_str()));
        }
        s
    }
}

/// Seed of candidate `index` under root seed `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CHUNK: usize = 64;

/// Builds a dataset. Candidates are processed in parallel, each with its own
/// derived seed, and collected in candidate order, so the output does not
/// depend on the worker count.
pub fn build_dataset(
    model: &PolicyModel,
    source: &PairSource,
    cfg: &DropoutConfig,
    vocab: &Vocab,
) -> Result<(Vec<PreferencePair>, DatasetSummary), DatagenError> {
    cfg.validate()?;
    let mut summary = DatasetSummary::default();
    let mut pairs = Vec::new();
    match source {
        PairSource::Sampled { n_pairs, sampler } => {
            if *n_pairs == 0 {
                return Err(DatagenError::NoPairsRequested);
            }
            let budget = n_pairs.saturating_mul(50).max(CHUNK);
            let mut next = 0usize;
            while pairs.len() < *n_pairs && next < budget {
                let outcomes: Vec<_> = (next..next + CHUNK)
                    .into_par_iter()
                    .map(|i| {
                        let seed = derive_seed(cfg.seed, i as u64);
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let set = sample_constraint_set(
                            vocab,
                            &mut rng,
                            cfg.min_constraints,
                            cfg.max_constraints,
                            cfg.max_response_len as u32,
                            sampler,
                        )?;
                        build_pair(model, &set, cfg, vocab, &mut rng, seed, "selfinst")
                    })
                    .collect();
                next += CHUNK;
                for outcome in outcomes {
                    if pairs.len() == *n_pairs {
                        break;
                    }
                    let outcome = outcome?;
                    summary.record(&outcome);
                    if let Ok(p) = outcome {
                        pairs.push(p);
                    }
                }
            }
        }
        PairSource::File(path) => {
            let text = std::fs::read_to_string(path)?;
            let mut sets = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let tokens: Vec<Token> = serde_json::from_str(line)
                    .map_err(|e| DatagenError::Schema { line: lineno + 1, message: e.to_string() })?;
                let ins = parse_instruction(&tokens, vocab)
                    .map_err(|e| DatagenError::Schema { line: lineno + 1, message: e.to_string() })?;
                sets.push(ins.constraints().to_vec());
            }
            let outcomes: Vec<_> = sets
                .par_iter()
                .enumerate()
                .map(|(i, set)| {
                    let seed = derive_seed(cfg.seed, i as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    build_pair(model, set, cfg, vocab, &mut rng, seed, "preinst-file")
                })
                .collect();
            for outcome in outcomes {
                let outcome = outcome?;
                summary.record(&outcome);
                if let Ok(p) = outcome {
                    pairs.push(p);
                }
            }
        }
    }
    Ok((pairs, summary))
}
