//! Tiny causal transformer policy.
//!
//! Parameters live in one flat `f32` buffer described by [`Layout`], which
//! keeps the optimizer, checkpointing and frozen clones trivial. Forward and
//! backward passes are written out by hand; probability math handed to the
//! losses is widened to `f64`.

mod checkpoint;
pub(crate) mod ops;
pub mod optim;
mod sample;
pub mod sft;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraint_lang::Token;
use ops::View;

pub use checkpoint::{load, save, CheckpointMeta, CHECKPOINT_VERSION};
pub use sample::{sample, Decode};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence of {len} tokens exceeds context length {max}")]
    Overlength { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    InvalidToken { token: Token, vocab: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty sequence")]
    Empty,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::constraint_lang::Vocab::default().size(),
            embed_dim: 128,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.context_len == 0 {
            return bad("n_layers and context_len must be positive".into());
        }
        Ok(())
    }
}

/// Offsets of every tensor in the flat parameter buffer.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_head: usize,
    pub b_head: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let (v, d, ctx) = (c.vocab_size, c.embed_dim, c.context_len);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(ctx * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_head = take(d * v);
        let b_head = take(v);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_head, b_head, total: at }
    }
}

/// The policy (or a frozen reference) model.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    params: Vec<f32>,
    layout_total: usize,
}

/// Row-major `rows × vocab` matrix of log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl LogProbs {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Response log-likelihood under the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

struct LayerTrace {
    ln1_out: Vec<f32>,
    ln1_xhat: Vec<f32>,
    ln1_rstd: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    ln2_out: Vec<f32>,
    ln2_xhat: Vec<f32>,
    ln2_rstd: Vec<f32>,
    fc_pre: Vec<f32>,
    fc_act: Vec<f32>,
}

/// Activations of one forward pass, kept for the backward pass.
pub(crate) struct Trace {
    tokens: Vec<Token>,
    layers: Vec<LayerTrace>,
    lnf_out: Vec<f32>,
    lnf_xhat: Vec<f32>,
    lnf_rstd: Vec<f32>,
    /// First sequence position whose next-token distribution was computed.
    head_from: usize,
    logp: Vec<f32>,
}

/// A teacher-forced pass over one response, ready for backpropagation.
pub struct ResponsePass {
    trace: Trace,
    targets: Vec<Token>,
    pub per_token: Vec<f64>,
}

impl ResponsePass {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }
}

impl PolicyModel {
    pub fn new(config: ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let proj = Normal::new(0.0f32, 0.02 / (2.0 * config.n_layers as f32).sqrt()).unwrap();
        let mut fill = |off: usize, n: usize, dist: &Normal<f32>, rng: &mut ChaCha8Rng| {
            for p in &mut params[off..off + n] {
                *p = dist.sample(rng);
            }
        };
        fill(layout.tok_emb, config.vocab_size * d, &normal, &mut rng);
        fill(layout.pos_emb, config.context_len * d, &normal, &mut rng);
        for l in &layout.layers {
            fill(l.w_qkv, d * 3 * d, &normal, &mut rng);
            fill(l.w_o, d * d, &proj, &mut rng);
            fill(l.w_fc, d * 4 * d, &normal, &mut rng);
            fill(l.w_proj, 4 * d * d, &proj, &mut rng);
        }
        fill(layout.w_head, d * config.vocab_size, &normal, &mut rng);
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Ok(Self { config, params, layout_total: layout.total })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f32>) -> Result<Self, LmError> {
        config.validate()?;
        let total = Layout::new(&config).total;
        if params.len() != total {
            return Err(LmError::Corrupt(format!("expected {total} parameters, found {}", params.len())));
        }
        Ok(Self { config, params, layout_total: total })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout_total
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Content hash of config and parameters.
    pub fn checkpoint_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Parameter-identical copy used as the reference policy. The clone owns
    /// its own buffer, so later updates to `self` never reach it.
    pub fn clone_frozen(&self) -> PolicyModel {
        self.clone()
    }

    fn validate_tokens(&self, tokens: &[Token]) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::Empty);
        }
        if tokens.len() > self.config.context_len {
            return Err(LmError::Overlength { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::InvalidToken { token, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Runs the network; next-token log-distributions are computed for
    /// positions `head_from..len`.
    fn run(&self, tokens: &[Token], head_from: usize) -> Trace {
        let c = &self.config;
        let (t, d, v, heads) = (tokens.len(), c.embed_dim, c.vocab_size, c.n_heads);
        let lay = self.layout();
        let p = &self.params;

        let mut x = vec![0f32; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let e = &p[lay.tok_emb + tok as usize * d..][..d];
            let pe = &p[lay.pos_emb + i * d..][..d];
            for j in 0..d {
                x[i * d + j] = e[j] + pe[j];
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for l in &lay.layers {
            let mut ln1_out = vec![0f32; t * d];
            let mut ln1_xhat = vec![0f32; t * d];
            let mut ln1_rstd = vec![0f32; t];
            ops::layernorm(
                &x,
                &p[l.ln1_g..l.ln1_g + d],
                &p[l.ln1_b..l.ln1_b + d],
                &mut ln1_out,
                &mut ln1_xhat,
                &mut ln1_rstd,
                d,
            );
            let mut qkv = vec![0f32; t * 3 * d];
            ops::gemm(
                View::new(&ln1_out, 0, t, d, d),
                View::new(p, l.w_qkv, d, 3 * d, 3 * d),
                &mut qkv,
                0,
                3 * d,
                0.0,
            );
            ops::add_bias(&mut qkv, &p[l.b_qkv..l.b_qkv + 3 * d]);
            let mut probs = vec![0f32; heads * t * t];
            let mut attn = vec![0f32; t * d];
            ops::attention(&qkv, t, d, heads, &mut probs, &mut attn);
            ops::gemm(View::new(&attn, 0, t, d, d), View::new(p, l.w_o, d, d, d), &mut x, 0, d, 1.0);
            ops::add_bias(&mut x, &p[l.b_o..l.b_o + d]);

            let mut ln2_out = vec![0f32; t * d];
            let mut ln2_xhat = vec![0f32; t * d];
            let mut ln2_rstd = vec![0f32; t];
            ops::layernorm(
                &x,
                &p[l.ln2_g..l.ln2_g + d],
                &p[l.ln2_b..l.ln2_b + d],
                &mut ln2_out,
                &mut ln2_xhat,
                &mut ln2_rstd,
                d,
            );
            let mut fc_pre = vec![0f32; t * 4 * d];
            ops::gemm(
                View::new(&ln2_out, 0, t, d, d),
                View::new(p, l.w_fc, d, 4 * d, 4 * d),
                &mut fc_pre,
                0,
                4 * d,
                0.0,
            );
            ops::add_bias(&mut fc_pre, &p[l.b_fc..l.b_fc + 4 * d]);
            let fc_act: Vec<f32> = fc_pre.iter().map(|&z| ops::gelu(z)).collect();
            ops::gemm(
                View::new(&fc_act, 0, t, 4 * d, 4 * d),
                View::new(p, l.w_proj, 4 * d, d, d),
                &mut x,
                0,
                d,
                1.0,
            );
            ops::add_bias(&mut x, &p[l.b_proj..l.b_proj + d]);
            layers.push(LayerTrace {
                ln1_out,
                ln1_xhat,
                ln1_rstd,
                qkv,
                probs,
                attn,
                ln2_out,
                ln2_xhat,
                ln2_rstd,
                fc_pre,
                fc_act,
            });
        }

        let rows = t - head_from;
        let xs = &x[head_from * d..];
        let mut lnf_out = vec![0f32; rows * d];
        let mut lnf_xhat = vec![0f32; rows * d];
        let mut lnf_rstd = vec![0f32; rows];
        ops::layernorm(
            xs,
            &p[lay.lnf_g..lay.lnf_g + d],
            &p[lay.lnf_b..lay.lnf_b + d],
            &mut lnf_out,
            &mut lnf_xhat,
            &mut lnf_rstd,
            d,
        );
        let mut logp = vec![0f32; rows * v];
        ops::gemm(
            View::new(&lnf_out, 0, rows, d, d),
            View::new(p, lay.w_head, d, v, v),
            &mut logp,
            0,
            v,
            0.0,
        );
        ops::add_bias(&mut logp, &p[lay.b_head..lay.b_head + v]);
        ops::log_softmax_rows(&mut logp, v);
        Trace { tokens: tokens.to_vec(), layers, lnf_out, lnf_xhat, lnf_rstd, head_from, logp }
    }

    /// Backpropagates `dlogp` (gradient w.r.t. the log-probability rows of
    /// `trace`) and accumulates parameter gradients into `grads`.
    fn backward(&self, trace: &Trace, dlogp: &[f32], grads: &mut [f32]) {
        let c = &self.config;
        let (t, d, v, heads) = (trace.tokens.len(), c.embed_dim, c.vocab_size, c.n_heads);
        let lay = self.layout();
        let p = &self.params;
        let rows = t - trace.head_from;
        assert_eq!(dlogp.len(), rows * v);
        assert_eq!(grads.len(), self.layout_total);

        // log-softmax: dz = g - softmax * sum(g)
        let mut dlogits = vec![0f32; rows * v];
        for r in 0..rows {
            let g = &dlogp[r * v..(r + 1) * v];
            let lp = &trace.logp[r * v..(r + 1) * v];
            let s: f32 = g.iter().sum();
            for j in 0..v {
                dlogits[r * v + j] = g[j] - lp[j].exp() * s;
            }
        }
        ops::gemm(
            View::new(&trace.lnf_out, 0, rows, d, d).t(),
            View::new(&dlogits, 0, rows, v, v),
            grads,
            lay.w_head,
            v,
            1.0,
        );
        ops::bias_grad(&dlogits, &mut grads[lay.b_head..lay.b_head + v]);
        let mut dlnf = vec![0f32; rows * d];
        ops::gemm(
            View::new(&dlogits, 0, rows, v, v),
            View::new(p, lay.w_head, d, v, v).t(),
            &mut dlnf,
            0,
            d,
            0.0,
        );
        let mut dx = vec![0f32; t * d];
        {
            let (dg, db) = split_pair(grads, lay.lnf_g, lay.lnf_b, d);
            ops::layernorm_backward(
                &dlnf,
                &trace.lnf_xhat,
                &trace.lnf_rstd,
                &p[lay.lnf_g..lay.lnf_g + d],
                dg,
                db,
                &mut dx[trace.head_from * d..],
                d,
                false,
            );
        }

        let mut dact = vec![0f32; t * 4 * d];
        let mut dln = vec![0f32; t * d];
        let mut dattn = vec![0f32; t * d];
        let mut dqkv = vec![0f32; t * 3 * d];
        for (l, tr) in lay.layers.iter().zip(&trace.layers).rev() {
            // MLP block
            ops::gemm(
                View::new(&tr.fc_act, 0, t, 4 * d, 4 * d).t(),
                View::new(&dx, 0, t, d, d),
                grads,
                l.w_proj,
                d,
                1.0,
            );
            ops::bias_grad(&dx, &mut grads[l.b_proj..l.b_proj + d]);
            ops::gemm(
                View::new(&dx, 0, t, d, d),
                View::new(p, l.w_proj, 4 * d, d, d).t(),
                &mut dact,
                0,
                4 * d,
                0.0,
            );
            for (g, &z) in dact.iter_mut().zip(&tr.fc_pre) {
                *g *= ops::gelu_grad(z);
            }
            ops::gemm(
                View::new(&tr.ln2_out, 0, t, d, d).t(),
                View::new(&dact, 0, t, 4 * d, 4 * d),
                grads,
                l.w_fc,
                4 * d,
                1.0,
            );
            ops::bias_grad(&dact, &mut grads[l.b_fc..l.b_fc + 4 * d]);
            ops::gemm(
                View::new(&dact, 0, t, 4 * d, 4 * d),
                View::new(p, l.w_fc, d, 4 * d, 4 * d).t(),
                &mut dln,
                0,
                d,
                0.0,
            );
            {
                let (dg, db) = split_pair(grads, l.ln2_g, l.ln2_b, d);
                ops::layernorm_backward(
                    &dln,
                    &tr.ln2_xhat,
                    &tr.ln2_rstd,
                    &p[l.ln2_g..l.ln2_g + d],
                    dg,
                    db,
                    &mut dx,
                    d,
                    true,
                );
            }

            // attention block
            ops::gemm(View::new(&tr.attn, 0, t, d, d).t(), View::new(&dx, 0, t, d, d), grads, l.w_o, d, 1.0);
            ops::bias_grad(&dx, &mut grads[l.b_o..l.b_o + d]);
            ops::gemm(View::new(&dx, 0, t, d, d), View::new(p, l.w_o, d, d, d).t(), &mut dattn, 0, d, 0.0);
            ops::attention_backward(&tr.qkv, &tr.probs, &dattn, t, d, heads, &mut dqkv);
            ops::gemm(
                View::new(&tr.ln1_out, 0, t, d, d).t(),
                View::new(&dqkv, 0, t, 3 * d, 3 * d),
                grads,
                l.w_qkv,
                3 * d,
                1.0,
            );
            ops::bias_grad(&dqkv, &mut grads[l.b_qkv..l.b_qkv + 3 * d]);
            ops::gemm(
                View::new(&dqkv, 0, t, 3 * d, 3 * d),
                View::new(p, l.w_qkv, d, 3 * d, 3 * d).t(),
                &mut dln,
                0,
                d,
                0.0,
            );
            {
                let (dg, db) = split_pair(grads, l.ln1_g, l.ln1_b, d);
                ops::layernorm_backward(
                    &dln,
                    &tr.ln1_xhat,
                    &tr.ln1_rstd,
                    &p[l.ln1_g..l.ln1_g + d],
                    dg,
                    db,
                    &mut dx,
                    d,
                    true,
                );
            }
        }

        for (i, &tok) in trace.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let te = lay.tok_emb + tok as usize * d;
            let pe = lay.pos_emb + i * d;
            for j in 0..d {
                grads[te + j] += row[j];
                grads[pe + j] += row[j];
            }
        }
    }

    /// Row `t` is the log next-token distribution after reading
    /// `context[..=t]`; it never depends on later positions.
    pub fn forward_logprobs(&self, context: &[Token]) -> Result<LogProbs, LmError> {
        self.validate_tokens(context)?;
        let trace = self.run(context, 0);
        Ok(LogProbs { rows: context.len(), vocab: self.config.vocab_size, data: trace.logp })
    }

    /// Log next-token distribution after the whole context.
    pub fn next_token_logprobs(&self, context: &[Token]) -> Result<Vec<f32>, LmError> {
        self.validate_tokens(context)?;
        Ok(self.run(context, context.len() - 1).logp)
    }

    fn response_input(&self, x: &[Token], y: &[Token]) -> Result<Vec<Token>, LmError> {
        if x.is_empty() || y.is_empty() {
            return Err(LmError::Empty);
        }
        let mut seq = Vec::with_capacity(x.len() + y.len());
        seq.extend_from_slice(x);
        seq.extend_from_slice(&y[..y.len() - 1]);
        self.validate_tokens(&seq)?;
        if x.len() + y.len() > self.config.context_len {
            return Err(LmError::Overlength { len: x.len() + y.len(), max: self.config.context_len });
        }
        if let Some(&token) = y.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::InvalidToken { token, vocab: self.config.vocab_size });
        }
        Ok(seq)
    }

    /// Next-token distributions at each response position: row `j` is
    /// `p(· | x, y[..j])`.
    pub fn response_distributions(&self, x: &[Token], y: &[Token]) -> Result<LogProbs, LmError> {
        let seq = self.response_input(x, y)?;
        let trace = self.run(&seq, x.len() - 1);
        Ok(LogProbs { rows: y.len(), vocab: self.config.vocab_size, data: trace.logp })
    }

    /// Teacher-forced `log p(y | x)` with its per-token factorization.
    /// Instruction positions are never scored.
    pub fn sequence_logprob(&self, x: &[Token], y: &[Token]) -> Result<SequenceLogProb, LmError> {
        let pass = self.response_pass(x, y)?;
        Ok(SequenceLogProb { total: pass.total(), per_token: pass.per_token })
    }

    pub fn response_pass(&self, x: &[Token], y: &[Token]) -> Result<ResponsePass, LmError> {
        let seq = self.response_input(x, y)?;
        let trace = self.run(&seq, x.len() - 1);
        let v = self.config.vocab_size;
        let per_token =
            y.iter().enumerate().map(|(j, &tok)| trace.logp[j * v + tok as usize] as f64).collect();
        Ok(ResponsePass { trace, targets: y.to_vec(), per_token })
    }

    /// Accumulates `Σ_j dloss[j] · ∂ log p(y_j | ·) / ∂θ` into `grads`.
    pub fn backward_response(&self, pass: &ResponsePass, dloss: &[f64], grads: &mut [f32]) {
        assert_eq!(dloss.len(), pass.targets.len());
        let v = self.config.vocab_size;
        let mut dlogp = vec![0f32; pass.targets.len() * v];
        for (j, (&tok, &g)) in pass.targets.iter().zip(dloss).enumerate() {
            dlogp[j * v + tok as usize] = g as f32;
        }
        self.backward(&pass.trace, &dlogp, grads);
    }
}

fn split_pair(grads: &mut [f32], a: usize, b: usize, n: usize) -> (&mut [f32], &mut [f32]) {
    debug_assert!(a + n <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + n], &mut hi[..n])
}
