//! Slice-level kernels shared by the graph ops and the test oracles' callers.
//!
//! Every reduction accumulates sequentially in index order.

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let row = &mut out[i * n..(i + 1) * n];
        axpy_rows(row, arow, b, n);
    }
}

/// `row += Σ_p coef[p] · rows[p]`, summed in order of `p`.
#[inline]
fn axpy_rows(row: &mut [f64], coef: &[f64], rows: &[f64], n: usize) {
    let k = coef.len();
    let mut p = 0;
    while p + 4 <= k {
        let (c0, c1, c2, c3) = (coef[p], coef[p + 1], coef[p + 2], coef[p + 3]);
        let r0 = &rows[p * n..(p + 1) * n];
        let r1 = &rows[(p + 1) * n..(p + 2) * n];
        let r2 = &rows[(p + 2) * n..(p + 3) * n];
        let r3 = &rows[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            row[j] = row[j] + c0 * r0[j] + c1 * r1[j] + c2 * r2[j] + c3 * r3[j];
        }
        p += 4;
    }
    while p < k {
        let c = coef[p];
        for (o, &v) in row.iter_mut().zip(&rows[p * n..(p + 1) * n]) {
            *o += c * v;
        }
        p += 1;
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, m, n, k, out);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let at = transpose(a, m, k);
    matmul_acc(&at, g, k, m, n, out);
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU, as used by the original BERT code.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise softmax over contiguous rows of `width`, with max subtraction.
pub fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        softmax_into(src, dst);
    }
    out
}

pub fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Softmax backward for one row: `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_row_grad(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let mut dot = 0.0;
    for (a, b) in y.iter().zip(dy) {
        dot += a * b;
    }
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d += yv * (g - dot);
    }
}

/// Normalized rows and reciprocal standard deviations for layer normalization.
pub struct LayerNormSaved {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layernorm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormSaved) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, LayerNormSaved { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)` for layer normalization over rows of `gamma.len()`.
pub fn layernorm_grad(
    dy: &[f64],
    gamma: &[f64],
    saved: &LayerNormSaved,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &saved.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = saved.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}
