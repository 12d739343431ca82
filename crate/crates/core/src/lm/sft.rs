//! Supervised fine-tuning on (instruction, response) pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{accumulate, clip_grad_norm, Adam, Schedule};
use super::{LmError, PolicyModel};
use crate::constraint_lang::Token;

/// One conditioning prefix and its target response tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 8,
            batch_size: 32,
            schedule: Schedule::Cosine,
            grad_clip: Some(1.0),
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftReport {
    /// Mean per-token negative log-likelihood of each optimizer step's batch.
    pub step_losses: Vec<f64>,
    /// Mean per-token NLL over each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean per-token NLL of `corpus` under `model` (no update).
pub fn corpus_nll(model: &PolicyModel, corpus: &[SftExample]) -> Result<f64, LmError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in corpus {
        let s = model.sequence_logprob(&ex.prompt, &ex.response)?;
        total -= s.total;
        count += s.per_token.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Minimizes the mean per-token NLL of responses given prompts. Prompt
/// positions are never scored. Bit-deterministic for a given seed.
pub fn sft_train(
    model: &mut PolicyModel,
    corpus: &[SftExample],
    cfg: &SftConfig,
) -> Result<SftReport, LmError> {
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(LmError::Config("batch_size and epochs must be positive".into()));
    }
    for ex in corpus {
        // surfaces overlength examples before any update
        model.response_input(&ex.prompt, &ex.response)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.num_params());
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let mut total_steps = steps_per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let mut report = SftReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            let items: Vec<&SftExample> = batch.iter().map(|&i| &corpus[i]).collect();
            let n_tokens: usize = items.iter().map(|e| e.response.len()).sum();
            let scale = 1.0 / n_tokens as f64;
            let (mut grads, nlls) = accumulate(model, &items, |ex, g| {
                let pass = model.response_pass(&ex.prompt, &ex.response).expect("validated above");
                let d = vec![-scale; pass.per_token.len()];
                model.backward_response(&pass, &d, g);
                -pass.total()
            });
            let batch_nll: f64 = nlls.iter().sum();
            let loss = batch_nll * scale;
            if !loss.is_finite() {
                return Err(LmError::Diverged { step, loss });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let lr = cfg.schedule.lr_at(cfg.lr, step, total_steps);
            opt.step(model.params_mut(), &grads, lr);
            report.step_losses.push(loss);
            epoch_nll += batch_nll;
            epoch_tokens += n_tokens;
            step += 1;
        }
        report.epoch_losses.push(epoch_nll / epoch_tokens.max(1) as f64);
    }
    if epoch_tail_is_partial(&report, steps_per_epoch) {
        log::debug!("stopped mid-epoch after {step} steps");
    }
    Ok(report)
}

fn epoch_tail_is_partial(report: &SftReport, steps_per_epoch: usize) -> bool {
    !report.step_losses.len().is_multiple_of(steps_per_epoch)
}
