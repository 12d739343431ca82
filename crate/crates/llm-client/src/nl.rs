//! Natural-language counterparts of the pair-construction steps.

use std::collections::BTreeMap;
use std::path::Path;

use futures::future::join_all;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use musc_core::datagen::{
    derive_seed, dropout_indices, write_records, PairRecord, Payload, Provenance, Scheme,
};

use crate::client::{ChatClient, Message};
use crate::templates::{fill, numbered, parse_numbered_list, PromptTemplateSet};
use crate::ClientError;

/// Splits an instruction into constraint strings, first item first.
pub async fn decompose_nl(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    instruction: &str,
) -> Result<Vec<String>, ClientError> {
    if instruction.trim().is_empty() {
        return Err(ClientError::EmptyInstruction);
    }
    let prompt = fill(&templates.decompose, &[("instruction", instruction)])?;
    parse_numbered_list(&client.complete(&[Message::user(prompt)]).await?)
}

pub async fn recombine_nl(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    constraints: &[String],
) -> Result<String, ClientError> {
    let prompt = fill(&templates.recombine, &[("constraints", &numbered(constraints))])?;
    Ok(client.complete(&[Message::user(prompt)]).await?.trim().to_string())
}

async fn rewrite_one(client: &ChatClient, template: &str, constraint: &str) -> Result<String, ClientError> {
    let prompt = fill(template, &[("constraint", constraint)])?;
    let items = parse_numbered_list(&client.complete(&[Message::user(prompt)]).await?)?;
    Ok(items.into_iter().next().expect("parser yields at least one item"))
}

pub async fn negate_nl(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    constraint: &str,
) -> Result<String, ClientError> {
    rewrite_one(client, &templates.negate, constraint).await
}

pub async fn substitute_nl(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    constraint: &str,
) -> Result<String, ClientError> {
    rewrite_one(client, &templates.substitute, constraint).await
}

/// Bounds on the number of decomposed constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlPairOptions {
    pub alpha: f64,
    pub scheme: Scheme,
    pub min_constraints: usize,
    pub max_constraints: usize,
    pub seed: u64,
}

impl Default for NlPairOptions {
    fn default() -> Self {
        Self { alpha: 0.3, scheme: Scheme::Dropout, min_constraints: 3, max_constraints: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NlDropout {
    pub chosen: String,
    pub rejected: String,
    /// 1-based positions removed from the constraint list.
    pub dropped: Vec<usize>,
}

/// Drops constraints with the shared dropout rule and recombines both lists.
pub async fn dropout_recombine_nl<R: Rng + ?Sized>(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    constraints: &[String],
    alpha: f64,
    rng: &mut R,
    opts: &NlPairOptions,
) -> Result<NlDropout, ClientError> {
    let dropped = select(constraints.len(), alpha, rng, opts)?;
    let kept: Vec<String> = constraints
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(&(i + 1)))
        .map(|(_, c)| c.clone())
        .collect();
    let chosen = recombine_nl(client, templates, constraints).await?;
    let rejected = recombine_nl(client, templates, &kept).await?;
    Ok(NlDropout { chosen, rejected, dropped })
}

fn select<R: Rng + ?Sized>(
    n: usize,
    alpha: f64,
    rng: &mut R,
    opts: &NlPairOptions,
) -> Result<Vec<usize>, ClientError> {
    if n < opts.min_constraints.max(2) {
        return Err(ClientError::Filtered("too_few"));
    }
    if n > opts.max_constraints {
        return Err(ClientError::Filtered("too_many"));
    }
    dropout_indices(n, alpha, rng).map_err(|e| ClientError::Config(e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlSummary {
    pub records: usize,
    pub emitted: usize,
    /// Filter name to count.
    pub rejected: BTreeMap<String, usize>,
    /// (1-based line, message) for records that failed outright.
    pub failures: Vec<(usize, String)>,
}

async fn build_one(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    instruction: &str,
    opts: &NlPairOptions,
    seed: u64,
) -> Result<PairRecord, ClientError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let constraints = decompose_nl(client, templates, instruction).await?;
    let corrupted = select(constraints.len(), opts.alpha, &mut rng, opts)?;
    let noised: Vec<String> = match opts.scheme {
        Scheme::Dropout => constraints
            .iter()
            .enumerate()
            .filter(|(i, _)| !corrupted.contains(&(i + 1)))
            .map(|(_, c)| c.clone())
            .collect(),
        Scheme::Negate | Scheme::Substitute => {
            let mut out = constraints.clone();
            for &i in &corrupted {
                out[i - 1] = match opts.scheme {
                    Scheme::Negate => negate_nl(client, templates, &out[i - 1]).await?,
                    _ => substitute_nl(client, templates, &out[i - 1]).await?,
                };
            }
            out
        }
    };
    let chosen_ins = recombine_nl(client, templates, &constraints).await?;
    let rejected_ins = recombine_nl(client, templates, &noised).await?;
    let chosen_resp = client.complete(&[Message::user(chosen_ins.clone())]).await?;
    let rejected_resp = client.complete(&[Message::user(rejected_ins.clone())]).await?;
    if chosen_resp.trim() == rejected_resp.trim() {
        return Err(ClientError::Filtered("identical_responses"));
    }
    Ok(PairRecord {
        chosen_ins: Payload::Text(chosen_ins),
        chosen_resp: Payload::Text(chosen_resp),
        rejected_ins: Payload::Text(rejected_ins),
        rejected_resp: Payload::Text(rejected_resp),
        dropped_indices: corrupted,
        scheme: opts.scheme,
        weights_chosen: None,
        weights_rejected: None,
        provenance: Provenance {
            seed,
            checkpoint_id: client.config().model.clone(),
            metric: None,
            source: "preinst-endpoint".into(),
            endpoint: Some(client.config().base_url.clone()),
        },
    })
}

/// Reads instructions (one per line, plain text or a JSON string) and writes
/// pairs in the shared dataset schema without token weights. Records that
/// fail are logged and skipped; cached replies make reruns cheap and
/// reproducible.
pub async fn build_nl_pairs(
    client: &ChatClient,
    templates: &PromptTemplateSet,
    input: &Path,
    output: &Path,
    opts: &NlPairOptions,
) -> Result<NlSummary, ClientError> {
    let text = std::fs::read_to_string(input)?;
    let lines: Vec<(usize, String)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let ins = serde_json::from_str::<String>(l).unwrap_or_else(|_| l.trim().to_string());
            (i + 1, ins)
        })
        .collect();
    let jobs = lines
        .iter()
        .enumerate()
        .map(|(k, (_, ins))| build_one(client, templates, ins, opts, derive_seed(opts.seed, k as u64)));
    let outcomes = join_all(jobs).await;
    let mut summary = NlSummary { records: lines.len(), ..NlSummary::default() };
    let mut records = Vec::new();
    for ((line, _), outcome) in lines.iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(ClientError::Filtered(reason)) => {
                *summary.rejected.entry(reason.to_string()).or_default() += 1;
            }
            Err(e) => {
                log::warn!("record on line {line} failed: {e}");
                summary.failures.push((*line, e.to_string()));
            }
        }
    }
    summary.emitted = records.len();
    write_records(&records, output).map_err(|e| ClientError::Dataset(e.to_string()))?;
    Ok(summary)
}
