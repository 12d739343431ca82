use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LmError, PolicyModel};
use crate::constraint_lang::{Token, EOS};

/// Decoding rule for autoregressive generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    Temperature { temperature: f64 },
}

/// Generates up to `max_len` tokens after `prefix`, stopping after the first
/// end marker (which is included in the output).
///
/// `allowed`, when given, restricts every draw to those tokens; the
/// temperature-scaled distribution is renormalized over them.
pub fn sample<R: Rng + ?Sized>(
    model: &PolicyModel,
    prefix: &[Token],
    decode: Decode,
    rng: &mut R,
    max_len: usize,
    allowed: Option<&[Token]>,
) -> Result<Vec<Token>, LmError> {
    if let Decode::Temperature { temperature } = decode {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(LmError::Config(format!("temperature must be positive, got {temperature}")));
        }
    }
    let ctx = model.config().context_len;
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && seq.len() < ctx {
        let logp = model.next_token_logprobs(&seq)?;
        let candidates: Vec<Token> = match allowed {
            Some(a) => a.to_vec(),
            None => (0..logp.len() as Token).collect(),
        };
        let next = match decode {
            Decode::Greedy => *candidates
                .iter()
                .max_by(|&&a, &&b| {
                    logp[a as usize]
                        .partial_cmp(&logp[b as usize])
                        .unwrap()
                        // ties resolve to the lowest token id
                        .then(b.cmp(&a))
                })
                .expect("non-empty candidate set"),
            Decode::Temperature { temperature } => {
                let scaled: Vec<f64> =
                    candidates.iter().map(|&t| logp[t as usize] as f64 / temperature).collect();
                let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = *candidates.last().unwrap();
                for (&t, w) in candidates.iter().zip(&weights) {
                    if u < *w {
                        pick = t;
                        break;
                    }
                    u -= w;
                }
                pick
            }
        };
        out.push(next);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}
