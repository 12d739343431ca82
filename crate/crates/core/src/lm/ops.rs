//! Dense kernels for the policy model: strided GEMM, layer norm, GELU and
//! causal attention, each with its backward pass.

/// Read-only strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f32],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows × cols` block starting at `off` with row stride `ld`.
    pub fn new(data: &'a [f32], off: usize, rows: usize, cols: usize, ld: usize) -> Self {
        let v = Self { data, off, rows, cols, rs: ld, cs: 1 };
        v.check();
        v
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `C[off..] (m×n, row stride ldc) = A·B + beta·C`.
pub(crate) fn gemm(a: View, b: View, c: &mut [f32], c_off: usize, ldc: usize, beta: f32) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_off + (m - 1) * ldc + n - 1 < c.len(), "output out of bounds");
    a.check();
    b.check();
    // SAFETY: all three views were bounds-checked above against their
    // backing slices; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}

pub(crate) const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm. Stores normalized rows in `xhat` and the inverse
/// standard deviations in `rstd`.
pub(crate) fn layernorm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    xhat: &mut [f32],
    rstd: &mut [f32],
    d: usize,
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gamma[i] + beta[i];
        }
    }
}

/// Accumulates parameter grads and writes (or adds, if `accumulate`) the
/// input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward(
    dout: &[f32],
    xhat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
    dx: &mut [f32],
    d: usize,
    accumulate: bool,
) {
    let mut dxhat = vec![0f32; d];
    for r in 0..rstd.len() {
        let go = &dout[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0f32;
        let mut mean_dxhat_xhat = 0f32;
        for i in 0..d {
            dgamma[i] += go[i] * xh[i];
            dbeta[i] += go[i];
            dxhat[i] = go[i] * gamma[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_xhat /= d as f32;
        for i in 0..d {
            let g = rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
            if accumulate {
                dx[r * d + i] += g;
            } else {
                dx[r * d + i] = g;
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Adds a bias row vector to every row.
pub(crate) fn add_bias(x: &mut [f32], bias: &[f32]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn bias_grad(dout: &[f32], dbias: &mut [f32]) {
    let n = dbias.len();
    for row in dout.chunks_exact(n) {
        for (g, d) in dbias.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// In-place log-softmax of each row of length `n`.
pub(crate) fn log_softmax_rows(x: &mut [f32], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Multi-head causal self-attention over a packed `T × 3d` QKV buffer.
/// Writes the concatenated head outputs (`T × d`) and keeps the attention
/// probabilities (`heads × T × T`) for the backward pass.
pub(crate) fn attention(qkv: &[f32], t: usize, d: usize, heads: usize, probs: &mut [f32], out: &mut [f32]) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    for h in 0..heads {
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        let q = View::new(qkv, h * hd, t, hd, 3 * d);
        let k = View::new(qkv, d + h * hd, t, hd, 3 * d);
        gemm(q, k.t(), p, 0, t, 0.0);
        for i in 0..t {
            let row = &mut p[i * t..(i + 1) * t];
            let mut max = f32::NEG_INFINITY;
            for v in row.iter_mut().take(i + 1) {
                *v *= scale;
                max = max.max(*v);
            }
            let mut sum = 0.0;
            for v in row.iter_mut().take(i + 1) {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut().take(i + 1) {
                *v /= sum;
            }
            for v in row.iter_mut().skip(i + 1) {
                *v = 0.0;
            }
        }
        let v = View::new(qkv, 2 * d + h * hd, t, hd, 3 * d);
        gemm(View::new(probs, h * t * t, t, t, t), v, out, h * hd, d, 0.0);
    }
}

pub(crate) fn attention_backward(
    qkv: &[f32],
    probs: &[f32],
    dout: &[f32],
    t: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [f32],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dp = vec![0f32; t * t];
    for h in 0..heads {
        let p = View::new(probs, h * t * t, t, t, t);
        let v = View::new(qkv, 2 * d + h * hd, t, hd, 3 * d);
        let go = View::new(dout, h * hd, t, hd, d);
        // dV = P^T dOut
        gemm(p.t(), go, dqkv, 2 * d + h * hd, 3 * d, 0.0);
        // dP = dOut V^T
        gemm(go, v.t(), &mut dp, 0, t, 0.0);
        let pr = &probs[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let prow = &pr[i * t..(i + 1) * t];
            let drow = &mut dp[i * t..(i + 1) * t];
            let dot: f32 = (0..=i).map(|j| prow[j] * drow[j]).sum();
            for j in 0..=i {
                drow[j] = prow[j] * (drow[j] - dot) * scale;
            }
            for x in drow.iter_mut().skip(i + 1) {
                *x = 0.0;
            }
        }
        let ds = View::new(&dp, 0, t, t, t);
        let q = View::new(qkv, h * hd, t, hd, 3 * d);
        let k = View::new(qkv, d + h * hd, t, hd, 3 * d);
        // dQ = dS K, dK = dS^T Q
        gemm(ds, k, dqkv, h * hd, 3 * d, 0.0);
        gemm(ds.t(), q, dqkv, d + h * hd, 3 * d, 0.0);
    }
}
