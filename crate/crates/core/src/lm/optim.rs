//! First-order optimization: Adam, learning-rate schedules, clipping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PolicyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate at `step` (0-based) of `total`; cosine decays from
    /// `base` at step 0 towards 0 at `total`.
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Adam with the usual moment constants and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Evaluates `f` for every item in parallel, each writing into its own
/// gradient buffer, then sums buffers and scalar outputs in item order. The
/// result is bit-identical for any thread count.
pub(crate) fn accumulate<T, R, F>(model: &PolicyModel, items: &[T], f: F) -> (Vec<f32>, Vec<R>)
where
    T: Sync,
    R: Send,
    F: Fn(&T, &mut [f32]) -> R + Sync,
{
    let n = model.num_params();
    let parts: Vec<(Vec<f32>, R)> = items
        .par_iter()
        .map(|item| {
            let mut g = vec![0f32; n];
            let r = f(item, &mut g);
            (g, r)
        })
        .collect();
    let mut total = vec![0f32; n];
    let mut outs = Vec::with_capacity(parts.len());
    for (g, r) in parts {
        total.iter_mut().zip(&g).for_each(|(t, x)| *t += x);
        outs.push(r);
    }
    (total, outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(Schedule::Cosine.lr_at(1.0, 0, 10), 1.0);
        assert!((Schedule::Cosine.lr_at(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(Schedule::Cosine.lr_at(1.0, 10, 10).abs() < 1e-12);
        assert_eq!(Schedule::Constant.lr_at(0.3, 7, 10), 0.3);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0f32, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }
}
