//! Preference optimization of a policy against its frozen starting copy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint_lang::{serialize_instruction, LangError, Token, Vocab};
use crate::datagen::PreferencePair;
use crate::lm::optim::{accumulate, clip_grad_norm, Adam, Schedule};
use crate::lm::{LmError, PolicyModel};
use crate::losses::{batch_mean, total_loss, LossConfig, LossError, Method, PairLogps};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("pair {index} has no token weights but use_weights is on")]
    MissingWeights { index: usize },
    #[error("dataset vocabulary has {data} tokens, model has {model}")]
    VocabMismatch { data: usize, model: usize },
    #[error("non-finite loss at step {step}; parameters restored to the last good step")]
    Diverged { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Hyperparameters reported for 7B-scale models.
    pub fn paper() -> Self {
        Self {
            lr: 1e-6,
            schedule: Schedule::Cosine,
            epochs: 2,
            batch_size: 64,
            grad_clip: None,
            seed: 0,
            loss: LossConfig::default(),
        }
    }

    /// Settings that move the tiny desk model within two epochs.
    pub fn desk() -> Self {
        Self { lr: 5e-5, batch_size: 16, ..Self::paper() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Batch means of the training indicators at one optimizer step, measured
/// before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    /// Always exactly `chosen_reward − rejected_reward`.
    pub reward_margin: f64,
    /// Unscaled SFT term; the loss includes it times the mixing weight.
    pub sft_component: f64,
}

pub const METRICS_HEADER: [&str; 7] =
    ["step", "epoch", "loss", "chosen_reward", "rejected_reward", "reward_margin", "sft_component"];

struct Item {
    prompt: Vec<Token>,
    chosen: Vec<Token>,
    rejected: Vec<Token>,
    weights: Option<crate::confidence::TokenWeights>,
    ref_chosen: Vec<f64>,
    ref_rejected: Vec<f64>,
}

struct StepOut {
    loss: f64,
    sft: f64,
    chosen_reward: f64,
    rejected_reward: f64,
}

/// Runs preference optimization in place and returns one metrics row per
/// step.
///
/// Both responses of a pair are scored under the chosen instruction. The
/// reference is a frozen copy of `model` taken before the first step; its
/// log-probabilities are computed once up front. Batches are drawn from a
/// seeded per-epoch shuffle and gradients are summed in a fixed order, so a
/// run is bit-reproducible for any worker count.
pub fn train(
    model: &mut PolicyModel,
    pairs: &[PreferencePair],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if vocab.size() != model.config().vocab_size {
        return Err(TrainError::VocabMismatch { data: vocab.size(), model: model.config().vocab_size });
    }
    let needs_weights = cfg.loss.use_weights && cfg.loss.method != Method::Dpo;
    if needs_weights {
        if let Some(index) = pairs.iter().position(|p| p.weights.is_none()) {
            return Err(TrainError::MissingWeights { index });
        }
    }

    let reference = model.clone_frozen();
    let items: Vec<Item> = pairs
        .par_iter()
        .map(|p| -> Result<Item, TrainError> {
            let prompt = serialize_instruction(&p.chosen_instruction, vocab)?;
            let chosen = p.chosen_response.tokens().to_vec();
            let rejected = p.rejected_response.tokens().to_vec();
            let ref_chosen = reference.sequence_logprob(&prompt, &chosen)?.per_token;
            let ref_rejected = reference.sequence_logprob(&prompt, &rejected)?.per_token;
            Ok(Item { prompt, chosen, rejected, weights: p.weights.clone(), ref_chosen, ref_rejected })
        })
        .collect::<Result<_, _>>()?;

    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = Adam::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rows = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let batch: Vec<&Item> = batch.iter().map(|&i| &items[i]).collect();
            let scale = 1.0 / batch.len() as f64;
            let policy = &*model;
            let (mut grads, outs) =
                accumulate(policy, &batch, |item, g| pair_step(policy, item, &cfg.loss, scale, g));
            let outs: Vec<StepOut> = outs.into_iter().collect::<Result<_, _>>()?;
            let mean = |f: fn(&StepOut) -> f64| batch_mean(&outs.iter().map(f).collect::<Vec<_>>());
            let chosen_reward = mean(|o| o.chosen_reward);
            let rejected_reward = mean(|o| o.rejected_reward);
            let row = MetricsRow {
                step,
                epoch,
                loss: mean(|o| o.loss),
                chosen_reward,
                rejected_reward,
                reward_margin: chosen_reward - rejected_reward,
                sft_component: mean(|o| o.sft),
            };
            if !row.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { step });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let lr = cfg.schedule.lr_at(cfg.lr, step, total_steps);
            let last_good = model.params().to_vec();
            opt.step(model.params_mut(), &grads, lr);
            if model.params().iter().any(|p| !p.is_finite()) {
                model.params_mut().copy_from_slice(&last_good);
                return Err(TrainError::Diverged { step });
            }
            rows.push(row);
            step += 1;
        }
    }
    Ok(rows)
}

fn pair_step(
    model: &PolicyModel,
    item: &Item,
    loss_cfg: &LossConfig,
    scale: f64,
    grads: &mut [f32],
) -> Result<StepOut, TrainError> {
    let pass_c = model.response_pass(&item.prompt, &item.chosen)?;
    let pass_r = model.response_pass(&item.prompt, &item.rejected)?;
    let logps = PairLogps {
        policy_chosen: pass_c.per_token.clone(),
        policy_rejected: pass_r.per_token.clone(),
        ref_chosen: item.ref_chosen.clone(),
        ref_rejected: item.ref_rejected.clone(),
        weights: item.weights.clone(),
    };
    let t = total_loss(&logps, loss_cfg)?;
    let dc: Vec<f64> = t.grad_chosen.iter().map(|g| g * scale).collect();
    let dr: Vec<f64> = t.grad_rejected.iter().map(|g| g * scale).collect();
    model.backward_response(&pass_c, &dc, grads);
    model.backward_response(&pass_r, &dr, grads);
    Ok(StepOut {
        loss: t.loss,
        sft: t.sft_loss,
        chosen_reward: t.chosen_reward,
        rejected_reward: t.rejected_reward,
    })
}

/// Writes the metrics table as CSV with a header row.
pub fn export_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
