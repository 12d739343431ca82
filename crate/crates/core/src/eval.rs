//! Exact constraint-satisfaction evaluation.
//!
//! For each instruction a response is decoded and every constraint is
//! checked. `csr` is the mean per-instruction fraction of satisfied
//! constraints, `isr` the fraction of instructions with everything satisfied
//! and `psr` the fraction whose first (primary) constraint is satisfied.
//! Per-level figures group instructions by constraint count.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraint_lang::{
    check_all, sample_constraint_set, Instruction, LangError, Response, SamplerConfig, Token, Vocab,
};
use crate::datagen::{derive_seed, generate_response, DatagenError, PreferencePair};
use crate::lm::{Decode, PolicyModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instructions to evaluate")]
    Empty,
    #[error("{instructions} instructions but {responses} responses")]
    CountMismatch { instructions: usize, responses: usize },
    #[error("reports cover different instruction sets ({0} vs {1})")]
    InstructionSetMismatch(String, String),
    #[error("{0} held-out instructions also occur in the training data")]
    Overlap(usize),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: Decode,
    pub seed: u64,
    pub max_response_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { decode: Decode::Greedy, seed: 0, max_response_len: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub hsr: f64,
    pub ssr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub csr: f64,
    pub isr: f64,
    pub psr: f64,
    pub per_level: BTreeMap<usize, LevelStats>,
    pub decode: Decode,
    pub seed: u64,
    pub n_instructions: usize,
    /// Hash of the ordered instruction ids.
    pub instruction_hash: String,
}

/// Outcome for a single instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionResult {
    pub instruction_id: String,
    pub level: usize,
    pub response: Vec<Token>,
    pub satisfied: Vec<bool>,
}

pub fn instruction_set_hash(instructions: &[Instruction]) -> String {
    let mut h = Sha256::new();
    for ins in instructions {
        h.update(ins.id().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Scores fixed responses against their instructions.
pub fn score_responses(
    instructions: &[Instruction],
    responses: &[Response],
    decode: Decode,
    seed: u64,
) -> Result<(EvalReport, Vec<InstructionResult>), EvalError> {
    if instructions.is_empty() {
        return Err(EvalError::Empty);
    }
    if instructions.len() != responses.len() {
        return Err(EvalError::CountMismatch {
            instructions: instructions.len(),
            responses: responses.len(),
        });
    }
    let results: Vec<InstructionResult> = instructions
        .iter()
        .zip(responses)
        .map(|(ins, r)| InstructionResult {
            instruction_id: ins.id().to_string(),
            level: ins.len(),
            response: r.tokens().to_vec(),
            satisfied: check_all(ins, r),
        })
        .collect();
    let report = aggregate(&results, decode, seed, instruction_set_hash(instructions));
    Ok((report, results))
}

fn fraction(s: &[bool]) -> f64 {
    s.iter().filter(|&&b| b).count() as f64 / s.len() as f64
}

fn aggregate(results: &[InstructionResult], decode: Decode, seed: u64, hash: String) -> EvalReport {
    let n = results.len() as f64;
    let mut csr = 0.0;
    let mut isr = 0usize;
    let mut psr = 0usize;
    let mut levels: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    for r in results {
        let frac = fraction(&r.satisfied);
        let all = r.satisfied.iter().all(|&b| b);
        csr += frac;
        isr += all as usize;
        psr += r.satisfied[0] as usize;
        let e = levels.entry(r.level).or_default();
        e.0 += 1;
        e.1 += all as usize;
        e.2 += frac;
    }
    EvalReport {
        csr: csr / n,
        isr: isr as f64 / n,
        psr: psr as f64 / n,
        per_level: levels
            .into_iter()
            .map(|(l, (cnt, hard, soft))| {
                (l, LevelStats { hsr: hard as f64 / cnt as f64, ssr: soft / cnt as f64, n: cnt })
            })
            .collect(),
        decode,
        seed,
        n_instructions: results.len(),
        instruction_hash: hash,
    }
}

/// Decodes one response per instruction and scores it. Instruction `i` uses
/// a seed derived from `cfg.seed` and `i`, so the report does not depend on
/// scheduling.
pub fn evaluate(
    model: &PolicyModel,
    instructions: &[Instruction],
    vocab: &Vocab,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<InstructionResult>), EvalError> {
    let responses: Vec<Response> = instructions
        .par_iter()
        .enumerate()
        .map(|(i, ins)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
            generate_response(model, ins, vocab, cfg.decode, &mut rng, cfg.max_response_len)
        })
        .collect::<Result<_, _>>()?;
    score_responses(instructions, &responses, cfg.decode, cfg.seed)
}

/// Per-metric differences `b − a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub csr: f64,
    pub isr: f64,
    pub psr: f64,
    /// Per level: (Δhsr, Δssr).
    pub per_level: BTreeMap<usize, (f64, f64)>,
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta, EvalError> {
    if a.instruction_hash != b.instruction_hash {
        return Err(EvalError::InstructionSetMismatch(
            a.instruction_hash.clone(),
            b.instruction_hash.clone(),
        ));
    }
    let per_level = a
        .per_level
        .iter()
        .map(|(l, sa)| {
            let sb = &b.per_level[l];
            (*l, (sb.hsr - sa.hsr, sb.ssr - sa.ssr))
        })
        .collect();
    Ok(ReportDelta { csr: b.csr - a.csr, isr: b.isr - a.isr, psr: b.psr - a.psr, per_level })
}

/// Held-out instruction set drawn with its own seed.
pub fn heldout_instructions(
    vocab: &Vocab,
    n: usize,
    seed: u64,
    min_constraints: usize,
    max_constraints: usize,
    max_len: u32,
    sampler: &SamplerConfig,
) -> Result<Vec<Instruction>, EvalError> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let set =
                sample_constraint_set(vocab, &mut rng, min_constraints, max_constraints, max_len, sampler)?;
            Ok(Instruction::new(set)?)
        })
        .collect()
}

/// Fails if any held-out instruction appears as a chosen instruction in the
/// training pairs.
pub fn check_overlap(train: &[PreferencePair], heldout: &[Instruction]) -> Result<(), EvalError> {
    let ids: HashSet<&str> = train.iter().map(|p| p.chosen_instruction.id()).collect();
    let n = heldout.iter().filter(|i| ids.contains(i.id())).count();
    if n > 0 {
        return Err(EvalError::Overlap(n));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ReportLine {
    Summary(EvalReport),
    Instruction(InstructionResult),
}

/// Line-delimited report: the summary first, then one line per instruction.
pub fn write_report(
    report: &EvalReport,
    results: &[InstructionResult],
    path: &Path,
) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, &ReportLine::Summary(report.clone()))?;
    out.write_all(b"\n")?;
    for r in results {
        serde_json::to_writer(&mut out, &ReportLine::Instruction(r.clone()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<(EvalReport, Vec<InstructionResult>), EvalError> {
    let text = fs::read_to_string(path)?;
    let mut summary = None;
    let mut results = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line)? {
            ReportLine::Summary(s) => summary = Some(s),
            ReportLine::Instruction(r) => results.push(r),
        }
    }
    Ok((summary.ok_or(EvalError::Empty)?, results))
}

pub fn summary_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let decode = match report.decode {
        Decode::Greedy => "greedy".to_string(),
        Decode::Temperature { temperature } => format!("temperature {temperature}"),
    };
    let _ = writeln!(s, "instructions  {}", report.n_instructions);
    let _ = writeln!(s, "decode        {decode} (seed {})", report.seed);
    let _ = writeln!(s, "CSR           {:.4}", report.csr);
    let _ = writeln!(s, "ISR           {:.4}", report.isr);
    let _ = writeln!(s, "PSR           {:.4}  (first-constraint satisfaction)", report.psr);
    let _ = writeln!(s, "level      n     HSR     SSR");
    for (l, st) in &report.per_level {
        let _ = writeln!(s, "{l:>5} {:>6} {:>7.4} {:>7.4}", st.n, st.hsr, st.ssr);
    }
    s
}

pub fn delta_text(d: &ReportDelta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ΔCSR {:+.4}  ΔISR {:+.4}  ΔPSR {:+.4}", d.csr, d.isr, d.psr);
    let _ = writeln!(s, "level    ΔHSR     ΔSSR");
    for (l, (h, ss)) in &d.per_level {
        let _ = writeln!(s, "{l:>5} {h:>+8.4} {ss:>+8.4}");
    }
    s
}
