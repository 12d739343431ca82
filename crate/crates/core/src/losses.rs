//! Preference losses over precomputed per-token log-probabilities.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the policy's per-token log-probabilities of the chosen and
//! rejected responses; the trainer backpropagates those through the model.
//!
//! With `ℓ_t = log π_θ(a_t|s_t) − log π_ref(a_t|s_t)` and token weights `r_t`:
//!
//! ```text
//! dpo    −log σ(β Σ ℓ^w − β Σ ℓ^l)
//! tdpo   −log σ(β Σ r^w ℓ^w − β Σ r^l ℓ^l)
//! simpo  −log σ(β (s_w − s_l) − γ),   s = Σ r log π_θ / Σ r
//! ipo    (Σ r^w ℓ^w − Σ r^l ℓ^l − 1/(2β))²
//! sft    −mean log π_θ(chosen)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::TokenWeights;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("token weights sum to zero")]
    ZeroWeightSum,
    #[error("empty response")]
    EmptyResponse,
    #[error("token weights required but absent")]
    MissingWeights,
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpo,
    Tdpo,
    Simpo,
    Ipo,
}

impl Method {
    pub fn default_beta(self) -> f64 {
        match self {
            Method::Dpo | Method::Tdpo => 0.2,
            Method::Simpo => 3.0,
            Method::Ipo => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    pub gamma_simpo: f64,
    pub sft_mix: f64,
    /// Token-level weights on; `false` is the uniform-weight ablation.
    pub use_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_method(Method::Tdpo)
    }
}

impl LossConfig {
    pub fn for_method(method: Method) -> Self {
        Self { method, beta: method.default_beta(), gamma_simpo: 1.0, sft_mix: 0.1, use_weights: true }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta > 0.0) {
            return Err(LossError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.sft_mix >= 0.0) {
            return Err(LossError::Config(format!("sft_mix must be >= 0, got {}", self.sft_mix)));
        }
        Ok(())
    }
}

/// Per-token log-probabilities of one preference pair (response positions
/// only).
#[derive(Debug, Clone, PartialEq)]
pub struct PairLogps {
    pub policy_chosen: Vec<f64>,
    pub policy_rejected: Vec<f64>,
    pub ref_chosen: Vec<f64>,
    pub ref_rejected: Vec<f64>,
    /// `None` means uniform weights.
    pub weights: Option<TokenWeights>,
}

impl PairLogps {
    fn validate(&self) -> Result<(), LossError> {
        let check = |what, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(LossError::LengthMismatch { what, expected, found })
            }
        };
        if self.policy_chosen.is_empty() || self.policy_rejected.is_empty() {
            return Err(LossError::EmptyResponse);
        }
        check("reference chosen", self.policy_chosen.len(), self.ref_chosen.len())?;
        check("reference rejected", self.policy_rejected.len(), self.ref_rejected.len())?;
        if let Some(w) = &self.weights {
            check("chosen weights", self.policy_chosen.len(), w.chosen.len())?;
            check("rejected weights", self.policy_rejected.len(), w.rejected.len())?;
        }
        Ok(())
    }

    fn weights_or_uniform(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.weights {
            Some(w) => (w.chosen.clone(), w.rejected.clone()),
            None => (vec![1.0; self.policy_chosen.len()], vec![1.0; self.policy_rejected.len()]),
        }
    }

    /// Same log-probs with the weights dropped.
    pub fn uniform(&self) -> PairLogps {
        PairLogps { weights: None, ..self.clone() }
    }
}

/// Value and gradient of a preference loss for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// `chosen_reward − rejected_reward`.
    pub margin: f64,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    /// ∂loss/∂log π_θ for each chosen token.
    pub grad_chosen: Vec<f64>,
    pub grad_rejected: Vec<f64>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn weighted_ratio_sum(policy: &[f64], reference: &[f64], weights: &[f64]) -> f64 {
    policy.iter().zip(reference).zip(weights).map(|((p, r), w)| w * (p - r)).sum()
}

/// `−log σ(β Σ r^w ℓ^w − β Σ r^l ℓ^l)` and its gradient.
fn logistic_pair(p: &PairLogps, beta: f64, wc: &[f64], wr: &[f64]) -> LossValue {
    let chosen_reward = beta * weighted_ratio_sum(&p.policy_chosen, &p.ref_chosen, wc);
    let rejected_reward = beta * weighted_ratio_sum(&p.policy_rejected, &p.ref_rejected, wr);
    let z = chosen_reward - rejected_reward;
    let dz = -sigmoid(-z);
    LossValue {
        loss: softplus(-z),
        margin: z,
        chosen_reward,
        rejected_reward,
        grad_chosen: wc.iter().map(|w| dz * beta * w).collect(),
        grad_rejected: wr.iter().map(|w| -dz * beta * w).collect(),
    }
}

/// Sequence-level DPO; token weights, if any, are ignored.
pub fn dpo_loss(p: &PairLogps, beta: f64) -> Result<LossValue, LossError> {
    p.validate()?;
    let wc = vec![1.0; p.policy_chosen.len()];
    let wr = vec![1.0; p.policy_rejected.len()];
    Ok(logistic_pair(p, beta, &wc, &wr))
}

/// Token-weighted DPO; uniform weights when `p.weights` is `None`.
pub fn tdpo_loss(p: &PairLogps, beta: f64) -> Result<LossValue, LossError> {
    p.validate()?;
    let (wc, wr) = p.weights_or_uniform();
    Ok(logistic_pair(p, beta, &wc, &wr))
}

/// Reference-free, length-normalized objective; the normalization is a
/// weighted mean of policy log-probs.
pub fn simpo_loss(p: &PairLogps, beta: f64, gamma: f64) -> Result<LossValue, LossError> {
    p.validate()?;
    let (wc, wr) = p.weights_or_uniform();
    let (sc, sr): (f64, f64) = (wc.iter().sum(), wr.iter().sum());
    if sc == 0.0 || sr == 0.0 {
        return Err(LossError::ZeroWeightSum);
    }
    let mean = |lp: &[f64], w: &[f64], s: f64| lp.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / s;
    let chosen_reward = beta * mean(&p.policy_chosen, &wc, sc);
    let rejected_reward = beta * mean(&p.policy_rejected, &wr, sr);
    let z = chosen_reward - rejected_reward - gamma;
    let dz = -sigmoid(-z);
    Ok(LossValue {
        loss: softplus(-z),
        margin: chosen_reward - rejected_reward,
        chosen_reward,
        rejected_reward,
        grad_chosen: wc.iter().map(|w| dz * beta * w / sc).collect(),
        grad_rejected: wr.iter().map(|w| -dz * beta * w / sr).collect(),
    })
}

/// Squared regression of the weighted log-ratio gap towards `1/(2β)`.
pub fn ipo_loss(p: &PairLogps, beta: f64) -> Result<LossValue, LossError> {
    p.validate()?;
    let (wc, wr) = p.weights_or_uniform();
    let hc = weighted_ratio_sum(&p.policy_chosen, &p.ref_chosen, &wc);
    let hr = weighted_ratio_sum(&p.policy_rejected, &p.ref_rejected, &wr);
    let resid = hc - hr - 1.0 / (2.0 * beta);
    Ok(LossValue {
        loss: resid * resid,
        margin: beta * (hc - hr),
        chosen_reward: beta * hc,
        rejected_reward: beta * hr,
        grad_chosen: wc.iter().map(|w| 2.0 * resid * w).collect(),
        grad_rejected: wr.iter().map(|w| -2.0 * resid * w).collect(),
    })
}

/// Mean negative policy log-likelihood over chosen tokens, with gradient.
pub fn sft_loss(p: &PairLogps) -> Result<(f64, Vec<f64>), LossError> {
    let n = p.policy_chosen.len();
    if n == 0 {
        return Err(LossError::EmptyResponse);
    }
    let loss = -p.policy_chosen.iter().sum::<f64>() / n as f64;
    Ok((loss, vec![-1.0 / n as f64; n]))
}

/// Token-level Bradley–Terry preference probability under uniform weights.
/// `tdpo_loss` on uniform weights equals `−ln` of this value.
pub fn token_bt_probability(p: &PairLogps, beta: f64) -> Result<f64, LossError> {
    p.validate()?;
    let sc: f64 = p.policy_chosen.iter().zip(&p.ref_chosen).map(|(a, b)| a - b).sum();
    let sr: f64 = p.policy_rejected.iter().zip(&p.ref_rejected).map(|(a, b)| a - b).sum();
    Ok(sigmoid(beta * sc - beta * sr))
}

/// Method loss plus the SFT mixing term, with the components kept apart for
/// logging.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub loss: f64,
    pub method_loss: f64,
    pub sft_loss: f64,
    pub margin: f64,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub grad_chosen: Vec<f64>,
    pub grad_rejected: Vec<f64>,
}

pub fn total_loss(p: &PairLogps, cfg: &LossConfig) -> Result<TotalLoss, LossError> {
    cfg.validate()?;
    let uniform;
    let p = if cfg.use_weights {
        if p.weights.is_none() && cfg.method != Method::Dpo {
            return Err(LossError::MissingWeights);
        }
        p
    } else {
        uniform = p.uniform();
        &uniform
    };
    let v = match cfg.method {
        Method::Dpo => dpo_loss(p, cfg.beta)?,
        Method::Tdpo => tdpo_loss(p, cfg.beta)?,
        Method::Simpo => simpo_loss(p, cfg.beta, cfg.gamma_simpo)?,
        Method::Ipo => ipo_loss(p, cfg.beta)?,
    };
    let (sft, sft_grad) = sft_loss(p)?;
    let grad_chosen = v.grad_chosen.iter().zip(&sft_grad).map(|(g, s)| g + cfg.sft_mix * s).collect();
    Ok(TotalLoss {
        loss: v.loss + cfg.sft_mix * sft,
        method_loss: v.loss,
        sft_loss: sft,
        margin: v.margin,
        chosen_reward: v.chosen_reward,
        rejected_reward: v.rejected_reward,
        grad_chosen,
        grad_rejected: v.grad_rejected,
    })
}

/// Neumaier-compensated mean, used for batch reductions.
pub fn batch_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    (sum + comp) / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pair(pc: &[f64], pr: &[f64], rc: &[f64], rr: &[f64]) -> PairLogps {
        PairLogps {
            policy_chosen: pc.to_vec(),
            policy_rejected: pr.to_vec(),
            ref_chosen: rc.to_vec(),
            ref_rejected: rr.to_vec(),
            weights: None,
        }
    }

    #[test]
    fn dpo_reference_values() {
        let same = pair(&[-1.0, -2.0], &[-0.5], &[-1.0, -2.0], &[-0.5]);
        let v = dpo_loss(&same, 0.2).unwrap();
        assert_abs_diff_eq!(v.loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(v.margin, 0.0);

        // Δ_w = Δ_l ≠ 0
        let eq = pair(&[-1.0], &[-2.0], &[-1.5], &[-2.5]);
        assert_abs_diff_eq!(dpo_loss(&eq, 0.7).unwrap().loss, std::f64::consts::LN_2, epsilon = 1e-12);

        // margin ln 3 at β = 1 → −ln σ(ln 3) = −ln(3/4)
        let m = pair(&[3f64.ln()], &[0.0], &[0.0], &[0.0]);
        let v = dpo_loss(&m, 1.0).unwrap();
        assert_abs_diff_eq!(v.margin, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v.loss, 0.287_682_072_451_780_9, epsilon = 1e-12);
    }

    #[test]
    fn tdpo_weight_scaling() {
        let mut p = pair(&[-1.0, -0.2], &[-0.3, -0.9, -1.1], &[-0.8, -0.4], &[-0.5, -0.6, -1.0]);
        let c = 1.7;
        p.weights = Some(TokenWeights { chosen: vec![c; 2], rejected: vec![c; 3] });
        let a = tdpo_loss(&p, 0.2).unwrap();
        let b = dpo_loss(&p, 0.2 * c).unwrap();
        assert_abs_diff_eq!(a.loss, b.loss, epsilon = 1e-9);
    }

    #[test]
    fn simpo_reference_values() {
        let p = pair(&[-1.0, -1.0], &[-1.0], &[], &[]);
        // reference log-probs are not needed, but lengths are validated
        let p = PairLogps { ref_chosen: vec![0.0; 2], ref_rejected: vec![0.0], ..p };
        let v = simpo_loss(&p, 3.0, 1.0).unwrap();
        // softplus(1)
        assert_abs_diff_eq!(v.loss, 1.313_261_687_518_222_8, epsilon = 1e-12);

        // s_w − s_l = γ/β → σ(0)
        let q = PairLogps {
            policy_chosen: vec![-0.5, -0.5],
            policy_rejected: vec![-0.5 - 1.0 / 3.0],
            ..p.clone()
        };
        assert_abs_diff_eq!(simpo_loss(&q, 3.0, 1.0).unwrap().loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn simpo_invariant_to_weight_scale() {
        let mut p = pair(&[-1.0, -0.3], &[-0.7, -2.0], &[0.0, 0.0], &[0.0, 0.0]);
        p.weights = Some(TokenWeights { chosen: vec![0.5, 1.5], rejected: vec![1.0, 0.25] });
        let a = simpo_loss(&p, 3.0, 1.0).unwrap().loss;
        p.weights = Some(TokenWeights { chosen: vec![1.0, 3.0], rejected: vec![4.0, 1.0] });
        let b = simpo_loss(&p, 3.0, 1.0).unwrap().loss;
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn simpo_zero_weight_sum() {
        let mut p = pair(&[-1.0], &[-1.0], &[0.0], &[0.0]);
        p.weights = Some(TokenWeights { chosen: vec![0.0], rejected: vec![1.0] });
        assert_eq!(simpo_loss(&p, 3.0, 1.0), Err(LossError::ZeroWeightSum));
    }

    #[test]
    fn ipo_reference_values() {
        let same = pair(&[-1.0], &[-2.0], &[-1.0], &[-2.0]);
        assert_abs_diff_eq!(ipo_loss(&same, 1.0).unwrap().loss, 0.25, epsilon = 1e-15);
        let target = pair(&[-0.5], &[-1.0], &[-1.0], &[-1.0]);
        assert_abs_diff_eq!(ipo_loss(&target, 1.0).unwrap().loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sft_reference_values() {
        let v = 10f64;
        let uniform = pair(&[-(v.ln()); 4], &[-1.0], &[0.0; 4], &[0.0]);
        assert_abs_diff_eq!(sft_loss(&uniform).unwrap().0, v.ln(), epsilon = 1e-12);
        let sure = pair(&[0.0; 3], &[-1.0], &[0.0; 3], &[0.0]);
        assert_eq!(sft_loss(&sure).unwrap().0, 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let p = pair(&[-1.0, -0.5], &[-2.0], &[-1.2, -0.4], &[-1.5]);
        let mut cfg = LossConfig { use_weights: false, ..LossConfig::default() };
        assert_eq!(cfg.beta, 0.2);
        assert_eq!(cfg.sft_mix, 0.1);
        let t = total_loss(&p, &cfg).unwrap();
        assert_abs_diff_eq!(t.loss, t.method_loss + 0.1 * t.sft_loss, epsilon = 1e-15);
        cfg.sft_mix = 0.0;
        let t0 = total_loss(&p, &cfg).unwrap();
        assert_eq!(t0.loss, tdpo_loss(&p, 0.2).unwrap().loss);

        cfg.use_weights = true;
        assert_eq!(total_loss(&p, &cfg), Err(LossError::MissingWeights));

        let mut w = p.clone();
        w.weights = Some(TokenWeights { chosen: vec![2.0, 0.1], rejected: vec![1.5] });
        let off = total_loss(&w, &LossConfig { use_weights: false, ..cfg }).unwrap();
        assert_eq!(off, total_loss(&p, &LossConfig { use_weights: false, ..cfg }).unwrap());
    }

    #[test]
    fn length_mismatch_reported() {
        let mut p = pair(&[-1.0], &[-1.0], &[0.0], &[0.0]);
        p.weights = Some(TokenWeights { chosen: vec![1.0, 1.0], rejected: vec![1.0] });
        assert!(matches!(tdpo_loss(&p, 0.2), Err(LossError::LengthMismatch { .. })));
    }

    #[test]
    fn bt_probability_equal_trajectories() {
        let p = pair(&[-1.0], &[-3.0], &[-1.0], &[-3.0]);
        assert_eq!(token_bt_probability(&p, 0.2).unwrap(), 0.5);
    }

    #[test]
    fn compensated_mean() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(batch_mean(&xs), 0.5);
    }

    fn arb_pair() -> impl Strategy<Value = PairLogps> {
        (1usize..6, 1usize..6).prop_flat_map(|(n, m)| {
            (
                proptest::collection::vec(-5.0f64..0.0, n),
                proptest::collection::vec(-5.0f64..0.0, m),
                proptest::collection::vec(-5.0f64..0.0, n),
                proptest::collection::vec(-5.0f64..0.0, m),
            )
                .prop_map(|(a, b, c, d)| pair(&a, &b, &c, &d))
        })
    }

    proptest! {
        #[test]
        fn positivity_and_margin_sign(p in arb_pair(), beta in 0.01f64..5.0) {
            let d = dpo_loss(&p, beta).unwrap();
            prop_assert!(d.loss > 0.0);
            prop_assert_eq!(d.margin > 0.0, d.loss < std::f64::consts::LN_2);
            prop_assert!(simpo_loss(&p, beta, 1.0).unwrap().loss > 0.0);
            prop_assert!(ipo_loss(&p, beta).unwrap().loss >= 0.0);
        }

        #[test]
        fn bt_probability_monotone_in_chosen(p in arb_pair(), bump in 0.01f64..2.0) {
            let before = token_bt_probability(&p, 0.5).unwrap();
            let mut q = p.clone();
            q.policy_chosen[0] += bump;
            prop_assert!(token_bt_probability(&q, 0.5).unwrap() >= before);
        }
    }
}
