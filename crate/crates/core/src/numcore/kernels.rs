//! Forward and backward kernels over raw row-major slices.
//!
//! Reductions run sequentially over the leading index. The exception is any
//! reduction over the token axis (attention weights, mean pooling): those sum
//! their addends in ascending value order, which makes the result independent
//! of token order.

/// Sums `values` after sorting them ascending. Permutation invariant.
pub(crate) fn sorted_sum(values: impl Iterator<Item = f64>, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(values);
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().fold(0.0, |acc, x| acc + x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Every output element accumulates its `k` products in ascending `p`
/// order; row blocking only changes which rows share a pass over `b`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let brow = &b[p * n..(p + 1) * n];
            let rows = o0
                .iter_mut()
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut());
            for ((((x0, x1), x2), x3), bv) in rows.zip(brow) {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`, via a transposed copy of `b`.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut bt = Vec::with_capacity(n * k);
    for j in 0..n {
        bt.extend((0..k).map(|p| b[p * n + j]));
    }
    matmul_acc(g, &bt, m, n, k, out);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
///
/// Each output element accumulates over `i` in ascending order.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let (g0, g1, g2, g3) = (
            &g[i * n..(i + 1) * n],
            &g[(i + 1) * n..(i + 2) * n],
            &g[(i + 2) * n..(i + 3) * n],
            &g[(i + 3) * n..(i + 4) * n],
        );
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let orow = &mut out[p * n..(p + 1) * n];
            let gs = g0.iter().zip(g1).zip(g2).zip(g3);
            for (o, (((v0, v1), v2), v3)) in orow.iter_mut().zip(gs) {
                *o = *o + a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
        }
        i += 4;
    }
    for i in i..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Softmax over contiguous slices of length `n`, `inner` apart.
pub(crate) fn softmax_strided(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for c in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + c;
            let m = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[idx(j)] /= z;
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = x.iter().fold(0.0, |acc, v| acc + (v - m).exp());
    m + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row statistics for layer norm: (mean, 1/sqrt(var+eps)).
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().fold(0.0, |a, x| a + x) / d;
    let var = row.iter().fold(0.0, |a, x| a + (x - mean) * (x - mean)) / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    rows: usize,
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let (mean, rstd) = row_stats(row, eps);
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
    }
    out
}

/// Multi-head scaled dot-product attention core.
///
/// `q` is `[tq × d]`, `k`/`v` are `[tk × d]`. Returns the `[tq × d]` output
/// and the attention probabilities laid out `[heads × tq × tk]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut probs = vec![0.0; heads * tq * tk];
    let mut buf = Vec::with_capacity(tk);
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            for (j, p) in prow.iter_mut().enumerate() {
                *p = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            let m = prow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for p in prow.iter_mut() {
                *p = (*p - m).exp();
            }
            let z = sorted_sum(prow.iter().copied(), &mut buf);
            for p in prow.iter_mut() {
                *p /= z;
            }
            for c in 0..dh {
                out[i * d + off + c] =
                    sorted_sum((0..tk).map(|j| prow[j] * v[j * d + off + c]), &mut buf);
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] w.r.t. `(q, k, v)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; tq * d];
    let mut dk = vec![0.0; tk * d];
    let mut dv = vec![0.0; tk * d];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let go = &dout[i * d + off..i * d + off + dh];
            for j in 0..tk {
                dp[j] = dot(go, &v[j * d + off..j * d + off + dh]);
                let pij = prow[j];
                for c in 0..dh {
                    dv[j * d + off + c] += pij * go[c];
                }
            }
            let inner = dot(prow, &dp);
            for j in 0..tk {
                let ds = prow[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Column means of a `[rows × d]` matrix, token-order invariant.
pub(crate) fn mean_rows(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(rows);
    (0..d)
        .map(|c| sorted_sum((0..rows).map(|r| x[r * d + c]), &mut buf) / rows as f64)
        .collect()
}
