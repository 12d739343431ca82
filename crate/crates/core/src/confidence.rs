//! Token confidence scores and the calibrated token weights derived from them.
//!
//! Every score is computed by teacher-forcing one response under both the
//! chosen instruction `x^w` and the corrupted instruction `x^l`, so positions
//! line up. Scores are uncertainties: larger means less confident.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint_lang::{serialize_instruction, LangError, Token, Vocab, BOS, EOI};
use crate::datagen::PreferencePair;
use crate::lm::{LmError, LogProbs, PolicyModel};

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pair uses a vocabulary of size {pair}, model has {model}")]
    VocabMismatch { pair: usize, model: usize },
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Lang(#[from] LangError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Entropy,
    Perplexity,
    Pmi,
    Kldiv,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Entropy => "entropy",
            Metric::Perplexity => "perplexity",
            Metric::Pmi => "pmi",
            Metric::Kldiv => "kldiv",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(Metric::Entropy),
            "perplexity" => Ok(Metric::Perplexity),
            "pmi" => Ok(Metric::Pmi),
            "kldiv" => Ok(Metric::Kldiv),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub metric: Metric,
    pub calibrated: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { gamma: 2.0, epsilon: 1e-6, metric: Metric::Entropy, calibrated: true }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        if !(self.gamma > 1.0) {
            return Err(ConfidenceError::Config(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(ConfidenceError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-token weights for both responses of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

impl TokenWeights {
    /// Checks that every weight lies in `(0, gamma]`.
    pub fn validate(&self, gamma: f64) -> Result<(), String> {
        for (name, v) in [("chosen", &self.chosen), ("rejected", &self.rejected)] {
            if let Some((i, w)) = v.iter().enumerate().find(|(_, &w)| !(w > 0.0 && w <= gamma)) {
                return Err(format!("{name} weight {i} = {w} outside (0, {gamma}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Chosen,
    Rejected,
}

/// Scores of one response under its own instruction and under the other one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreProfile {
    pub values_own: Vec<f64>,
    pub values_cross: Vec<f64>,
    pub metric: Metric,
    pub model_checkpoint_id: String,
}

/// Natural-log entropy of a distribution given as log-probabilities.
pub fn entropy_of(logp: &[f64]) -> f64 {
    let h: f64 = logp.iter().filter(|l| l.is_finite()).map(|&l| -l.exp() * l).sum();
    h.clamp(0.0, (logp.len() as f64).ln())
}

/// `KL(p ‖ q)` for distributions given as log-probabilities.
pub fn kl_of(logp: &[f64], logq: &[f64]) -> f64 {
    let d: f64 = logp.iter().zip(logq).filter(|(p, _)| p.is_finite()).map(|(&p, &q)| p.exp() * (p - q)).sum();
    d.max(0.0)
}

fn row_f64(lp: &LogProbs, t: usize) -> Vec<f64> {
    lp.row(t).iter().map(|&v| v as f64).collect()
}

/// Entry `t` is the entropy of the next-token distribution at response
/// position `t`. It depends on the prefix only, not on `response[t]`.
pub fn token_entropy(
    model: &PolicyModel,
    instruction: &[Token],
    response: &[Token],
) -> Result<Vec<f64>, ConfidenceError> {
    let lp = model.response_distributions(instruction, response)?;
    Ok((0..lp.rows).map(|t| entropy_of(&row_f64(&lp, t))).collect())
}

/// Entry `t` is `exp(−log p(y_t | x, y_<t))`.
pub fn perplexity_score(
    model: &PolicyModel,
    instruction: &[Token],
    response: &[Token],
) -> Result<Vec<f64>, ConfidenceError> {
    let s = model.sequence_logprob(instruction, response)?;
    Ok(s.per_token.iter().map(|l| (-l).exp()).collect())
}

/// Conditioning prefix with no constraints, used for the unconditional term
/// of PMI.
pub const EMPTY_PREFIX: [Token; 2] = [BOS, EOI];

/// Entry `t` is `exp(−PMI_t)` where
/// `PMI_t = log p(y_t | x, y_<t) − log p(y_t | ∅, y_<t)`.
pub fn pmi_score(
    model: &PolicyModel,
    instruction: &[Token],
    response: &[Token],
) -> Result<Vec<f64>, ConfidenceError> {
    let cond = model.sequence_logprob(instruction, response)?;
    let uncond = model.sequence_logprob(&EMPTY_PREFIX, response)?;
    Ok(cond.per_token.iter().zip(&uncond.per_token).map(|(c, u)| (u - c).exp()).collect())
}

/// Entry `t` is `KL(p(·|x_w, y_<t) ‖ p(·|x_l, y_<t))`.
pub fn kldiv_score(
    model: &PolicyModel,
    x_w: &[Token],
    x_l: &[Token],
    response: &[Token],
) -> Result<Vec<f64>, ConfidenceError> {
    let pw = model.response_distributions(x_w, response)?;
    let pl = model.response_distributions(x_l, response)?;
    Ok((0..pw.rows).map(|t| kl_of(&row_f64(&pw, t), &row_f64(&pl, t))).collect())
}

/// Scores `response` under `own` and under `cross` with the given metric.
/// For KL both vectors hold the same divergence (it already compares the two
/// instructions); `own` must be `x^w` for the orientation to match.
pub fn score_profile(
    model: &PolicyModel,
    metric: Metric,
    own: &[Token],
    cross: &[Token],
    response: &[Token],
) -> Result<TokenScoreProfile, ConfidenceError> {
    let (values_own, values_cross) = match metric {
        Metric::Entropy => (token_entropy(model, own, response)?, token_entropy(model, cross, response)?),
        Metric::Perplexity => {
            (perplexity_score(model, own, response)?, perplexity_score(model, cross, response)?)
        }
        Metric::Pmi => (pmi_score(model, own, response)?, pmi_score(model, cross, response)?),
        Metric::Kldiv => {
            let d = kldiv_score(model, own, cross, response)?;
            (d.clone(), d)
        }
    };
    Ok(TokenScoreProfile { values_own, values_cross, metric, model_checkpoint_id: model.checkpoint_id() })
}

/// Ratio weights: chosen `min(Γ, u_w / u_l)`, rejected `min(Γ, u_l / u_w)`,
/// with both scores floored at ε so the result stays positive and finite.
pub fn calibrate(
    u_w: &[f64],
    u_l: &[f64],
    role: Role,
    cfg: &CalibrationConfig,
) -> Result<Vec<f64>, ConfidenceError> {
    if u_w.len() != u_l.len() {
        return Err(ConfidenceError::LengthMismatch(u_w.len(), u_l.len()));
    }
    let eps = cfg.epsilon;
    Ok(u_w
        .iter()
        .zip(u_l)
        .map(|(&w, &l)| {
            let (num, den) = match role {
                Role::Chosen => (w, l),
                Role::Rejected => (l, w),
            };
            (num.max(eps) / den.max(eps)).min(cfg.gamma)
        })
        .collect())
}

/// Weights without the cross-instruction comparison:
/// `min(Γ, u_t / mean(u))`.
pub fn uncalibrated(u_own: &[f64], cfg: &CalibrationConfig) -> Vec<f64> {
    let eps = cfg.epsilon;
    let mean = u_own.iter().sum::<f64>() / u_own.len().max(1) as f64;
    u_own.iter().map(|&u| (u.max(eps) / mean.max(eps)).min(cfg.gamma)).collect()
}

/// KL weights: chosen `1/(1+d)`, rejected `min(Γ, 1+d)`.
pub fn kl_weights(d: &[f64], role: Role, cfg: &CalibrationConfig) -> Vec<f64> {
    d.iter()
        .map(|&d| match role {
            Role::Chosen => 1.0 / (1.0 + d),
            Role::Rejected => (1.0 + d).min(cfg.gamma),
        })
        .collect()
}

fn weights_for(
    profile_w: &TokenScoreProfile,
    profile_l: &TokenScoreProfile,
    cfg: &CalibrationConfig,
) -> Result<TokenWeights, ConfidenceError> {
    // profile_w: chosen response (own = x^w); profile_l: rejected response (own = x^l)
    if !cfg.calibrated {
        let own = |p: &TokenScoreProfile| match cfg.metric {
            Metric::Kldiv => p.values_own.iter().map(|d| 1.0 + d).collect::<Vec<_>>(),
            _ => p.values_own.clone(),
        };
        return Ok(TokenWeights {
            chosen: uncalibrated(&own(profile_w), cfg),
            rejected: uncalibrated(&own(profile_l), cfg),
        });
    }
    if cfg.metric == Metric::Kldiv {
        return Ok(TokenWeights {
            chosen: kl_weights(&profile_w.values_own, Role::Chosen, cfg),
            rejected: kl_weights(&profile_l.values_own, Role::Rejected, cfg),
        });
    }
    Ok(TokenWeights {
        chosen: calibrate(&profile_w.values_own, &profile_w.values_cross, Role::Chosen, cfg)?,
        rejected: calibrate(&profile_l.values_cross, &profile_l.values_own, Role::Rejected, cfg)?,
    })
}

/// Computes token weights for a pair with the frozen reference model and
/// records the metric in the provenance.
pub fn attach_weights(
    pair: &PreferencePair,
    ref_model: &PolicyModel,
    vocab: &Vocab,
    cfg: &CalibrationConfig,
) -> Result<PreferencePair, ConfidenceError> {
    cfg.validate()?;
    if vocab.size() != ref_model.config().vocab_size {
        return Err(ConfidenceError::VocabMismatch {
            pair: vocab.size(),
            model: ref_model.config().vocab_size,
        });
    }
    if pair.provenance.checkpoint_id != ref_model.checkpoint_id() {
        log::debug!(
            "weighting pair generated by {} with reference {}",
            pair.provenance.checkpoint_id,
            ref_model.checkpoint_id()
        );
    }
    let x_w = serialize_instruction(&pair.chosen_instruction, vocab)?;
    let x_l = serialize_instruction(&pair.rejected_instruction, vocab)?;
    let y_w = pair.chosen_response.tokens();
    let y_l = pair.rejected_response.tokens();
    let chosen = score_profile(ref_model, cfg.metric, &x_w, &x_l, y_w)?;
    // KL is always oriented as KL(x^w ‖ x^l)
    let rejected = match cfg.metric {
        Metric::Kldiv => score_profile(ref_model, cfg.metric, &x_w, &x_l, y_l)?,
        _ => score_profile(ref_model, cfg.metric, &x_l, &x_w, y_l)?,
    };
    let weights = weights_for(&chosen, &rejected, cfg)?;
    let mut out = pair.clone();
    out.weights = Some(weights);
    out.provenance.metric = Some(if cfg.calibrated {
        cfg.metric.name().to_string()
    } else {
        format!("{}-uncalibrated", cfg.metric.name())
    });
    Ok(out)
}

/// `attach_weights` over a dataset, in parallel, preserving order.
pub fn attach_weights_all(
    pairs: &[PreferencePair],
    ref_model: &PolicyModel,
    vocab: &Vocab,
    cfg: &CalibrationConfig,
) -> Result<Vec<PreferencePair>, ConfidenceError> {
    pairs.par_iter().map(|p| attach_weights(p, ref_model, vocab, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint_lang::{AtomicConstraint, Instruction, Requirement, Response};
    use crate::datagen::{Provenance, Scheme};
    use crate::lm::ModelConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model(seed: u64) -> PolicyModel {
        PolicyModel::new(ModelConfig {
            vocab_size: Vocab::default().size(),
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 64,
            seed,
        })
        .unwrap()
    }

    fn pair(same_instruction: bool) -> PreferencePair {
        let v = Vocab::default();
        let (a, b, c) = (v.letter(0), v.letter(1), v.letter(2));
        let cs = vec![
            AtomicConstraint::positive(Requirement::StartsWith(a)),
            AtomicConstraint::positive(Requirement::Contains(b)),
            AtomicConstraint::negative(Requirement::EndsWith(c)),
        ];
        let rejected = if same_instruction { cs.clone() } else { vec![cs[0], cs[2]] };
        PreferencePair {
            chosen_instruction: Instruction::new(cs).unwrap(),
            chosen_response: Response::from_content(&[a, b, b, a]),
            rejected_instruction: Instruction::new(rejected).unwrap(),
            rejected_response: Response::from_content(&[a, c, c]),
            dropped_indices: vec![2],
            scheme: Scheme::Dropout,
            weights: None,
            provenance: Provenance {
                seed: 0,
                checkpoint_id: String::new(),
                metric: None,
                source: "test".into(),
                endpoint: None,
            },
        }
    }

    #[test]
    fn entropy_extremes_and_hand_value() {
        let v = 34usize;
        let uniform = vec![-(v as f64).ln(); v];
        assert_abs_diff_eq!(entropy_of(&uniform), (v as f64).ln(), epsilon = 1e-12);
        let mut one_hot = vec![f64::NEG_INFINITY; 5];
        one_hot[2] = 0.0;
        assert_eq!(entropy_of(&one_hot), 0.0);
        let p = [0.5f64, 0.25, 0.25];
        let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        // 0.5 ln 2 + 2 · 0.25 ln 4 = 1.5 ln 2
        assert_abs_diff_eq!(entropy_of(&lp), 1.5 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(entropy_of(&lp), 1.0397, epsilon = 1e-4);
    }

    #[test]
    fn kl_hand_value() {
        let p = [0.9f64.ln(), 0.1f64.ln()];
        let q = [0.5f64.ln(), 0.5f64.ln()];
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert_abs_diff_eq!(kl_of(&p, &q), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_of(&p, &q), 0.3681, epsilon = 1e-4);
        assert_eq!(kl_of(&q, &q), 0.0);
        let cfg = CalibrationConfig::default();
        assert_eq!(kl_weights(&[0.0], Role::Chosen, &cfg), vec![1.0]);
        assert_eq!(kl_weights(&[0.0], Role::Rejected, &cfg), vec![1.0]);
        assert_eq!(kl_weights(&[5.0], Role::Rejected, &cfg), vec![2.0]);
    }

    #[test]
    fn calibration_examples() {
        let cfg = CalibrationConfig::default();
        let r = calibrate(&[0.7], &[0.7], Role::Chosen, &cfg).unwrap();
        assert_eq!(r, vec![1.0]);
        assert_eq!(calibrate(&[0.7], &[0.7], Role::Rejected, &cfg).unwrap(), vec![1.0]);
        // rejected token: u_l = 1.5, u_w = 0.5 gives ratio 3, capped at 2
        assert_eq!(calibrate(&[0.5], &[1.5], Role::Rejected, &cfg).unwrap(), vec![2.0]);
        let c = calibrate(&[0.5], &[1.5], Role::Chosen, &cfg).unwrap();
        assert_abs_diff_eq!(c[0], 1.0 / 3.0, epsilon = 1e-15);
        assert!(calibrate(&[1.0], &[1.0, 2.0], Role::Chosen, &cfg).is_err());
        // zero scores on both sides stay at the symmetry point
        assert_eq!(calibrate(&[0.0], &[0.0], Role::Chosen, &cfg).unwrap(), vec![1.0]);
        assert!(calibrate(&[0.0], &[1.0], Role::Chosen, &cfg).unwrap()[0] > 0.0);
    }

    #[test]
    fn uncalibrated_rule() {
        let cfg = CalibrationConfig::default();
        let r = uncalibrated(&[1.0, 2.0, 3.0], &cfg);
        assert_eq!(r, vec![0.5, 1.0, 1.5]);
        assert_eq!(uncalibrated(&[0.0, 0.0], &cfg), vec![1.0, 1.0]);
        assert_eq!(uncalibrated(&[0.1, 0.1, 10.0], &cfg)[2], 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(CalibrationConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(CalibrationConfig::default().validate().is_ok());
    }

    #[test]
    fn perplexity_matches_sequence_logprob() {
        let m = model(3);
        let p = pair(false);
        let v = Vocab::default();
        let x = serialize_instruction(&p.chosen_instruction, &v).unwrap();
        let y = p.chosen_response.tokens();
        let ppl = perplexity_score(&m, &x, y).unwrap();
        let lp = m.sequence_logprob(&x, y).unwrap();
        for (u, l) in ppl.iter().zip(&lp.per_token) {
            assert_abs_diff_eq!(*u, (-l).exp(), epsilon = 1e-12);
            assert!(*u >= 1.0);
        }
    }

    #[test]
    fn pmi_with_empty_instruction_is_one() {
        let m = model(4);
        let y = Response::from_content(&[Vocab::default().letter(3)]);
        let u = pmi_score(&m, &EMPTY_PREFIX, y.tokens()).unwrap();
        assert!(u.iter().all(|&u| u == 1.0));
        let x = serialize_instruction(&pair(false).chosen_instruction, &Vocab::default()).unwrap();
        assert!(pmi_score(&m, &x, y.tokens()).unwrap().iter().all(|&u| u > 0.0));
    }

    #[test]
    fn pmi_hand_value() {
        // PMI = ln 0.8 − ln 0.2 = ln 4, u = exp(−PMI)
        let u = (0.2f64.ln() - 0.8f64.ln()).exp();
        assert_abs_diff_eq!(u, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn entropy_is_prefix_only() {
        let m = model(5);
        let v = Vocab::default();
        let x = serialize_instruction(&pair(false).chosen_instruction, &v).unwrap();
        let y1 = Response::from_content(&[v.letter(0), v.letter(1), v.letter(2)]);
        let y2 = Response::from_content(&[v.letter(0), v.letter(1), v.letter(5)]);
        let e1 = token_entropy(&m, &x, y1.tokens()).unwrap();
        let e2 = token_entropy(&m, &x, y2.tokens()).unwrap();
        // position 2 sees the same prefix; position 3 does not
        assert_eq!(e1[..3], e2[..3]);
        let ln_v = (v.size() as f64).ln();
        assert!(e1.iter().all(|&e| (0.0..=ln_v).contains(&e)));
    }

    #[test]
    fn degenerate_pair_gets_unit_weights() {
        let m = model(6);
        let v = Vocab::default();
        for metric in [Metric::Entropy, Metric::Perplexity, Metric::Pmi, Metric::Kldiv] {
            let cfg = CalibrationConfig { metric, ..Default::default() };
            let out = attach_weights(&pair(true), &m, &v, &cfg).unwrap();
            let w = out.weights.unwrap();
            assert!(w.chosen.iter().chain(&w.rejected).all(|&r| r == 1.0), "{metric:?}");
            assert_eq!(out.provenance.metric.as_deref(), Some(metric.name()));
        }
    }

    #[test]
    fn attached_weights_are_bounded_and_deterministic() {
        let m = model(7);
        let v = Vocab::default();
        for metric in [Metric::Entropy, Metric::Perplexity, Metric::Pmi, Metric::Kldiv] {
            for calibrated in [true, false] {
                let cfg = CalibrationConfig { metric, calibrated, ..Default::default() };
                let a = attach_weights(&pair(false), &m, &v, &cfg).unwrap();
                let b = attach_weights(&pair(false), &m, &v, &cfg).unwrap();
                assert_eq!(a, b);
                let w = a.weights.unwrap();
                assert_eq!(w.chosen.len(), 5);
                assert_eq!(w.rejected.len(), 4);
                w.validate(cfg.gamma).unwrap();
            }
        }
    }

    #[test]
    fn vocab_mismatch_is_an_error() {
        let m = model(0);
        let small = Vocab::new(4, 12).unwrap();
        assert!(matches!(
            attach_weights(&pair(false), &m, &small, &CalibrationConfig::default()),
            Err(ConfidenceError::VocabMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn reciprocity_and_bounds(a in 1e-3f64..10.0, b in 1e-3f64..10.0) {
            let cfg = CalibrationConfig { gamma: f64::INFINITY, ..Default::default() };
            let c = calibrate(&[a], &[b], Role::Chosen, &cfg).unwrap()[0];
            let r = calibrate(&[a], &[b], Role::Rejected, &cfg).unwrap()[0];
            prop_assert!((c * r - 1.0).abs() < 1e-12);
            let capped = CalibrationConfig::default();
            for role in [Role::Chosen, Role::Rejected] {
                let w = calibrate(&[a], &[b], role, &capped).unwrap()[0];
                prop_assert!(w > 0.0 && w <= 2.0);
            }
        }

        #[test]
        fn kl_is_nonnegative(p in proptest::collection::vec(0.01f64..1.0, 4), q in proptest::collection::vec(0.01f64..1.0, 4)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| (x / s).ln()).collect::<Vec<_>>() };
            prop_assert!(kl_of(&norm(&p), &norm(&q)) >= 0.0);
        }
    }
}
