//! Log-domain Sinkhorn scaling with a hand-written reverse pass.
//!
//! The forward iteration keeps only the dual vectors per step, so the
//! tape cost is `O(iters * (rows + cols))` rather than one full matrix per
//! half-iteration.

use super::matrix::Matrix;

/// Stable `log(sum(exp(xs)))`. Returns `-inf` for an empty or all `-inf` input.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Dual iterates recorded by [`log_sinkhorn`]. `us[t]`/`vs[t]` hold the
/// values after iteration `t + 1`.
#[derive(Clone, Debug)]
pub struct SinkhornTrace {
    pub log_mu: Vec<f64>,
    pub log_nu: Vec<f64>,
    pub us: Vec<Vec<f64>>,
    pub vs: Vec<Vec<f64>>,
}

/// Runs `iters` rounds of log-domain Sinkhorn on the log-kernel `scores`.
/// Returns `log Z` where `Z = diag(e^u) e^scores diag(e^v)`.
pub fn log_sinkhorn(
    scores: &Matrix,
    log_mu: &[f64],
    log_nu: &[f64],
    iters: usize,
) -> (Matrix, SinkhornTrace) {
    let (rows, cols) = scores.shape();
    debug_assert_eq!(log_mu.len(), rows);
    debug_assert_eq!(log_nu.len(), cols);
    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    let mut us = Vec::with_capacity(iters);
    let mut vs = Vec::with_capacity(iters);
    let mut col_buf = vec![0.0; rows];
    for _ in 0..iters {
        for i in 0..rows {
            let row = scores.row(i);
            u[i] = log_mu[i] - logsumexp(row.iter().zip(&v).map(|(s, vj)| s + vj));
        }
        for j in 0..cols {
            for i in 0..rows {
                col_buf[i] = scores.get(i, j) + u[i];
            }
            v[j] = log_nu[j] - logsumexp(col_buf.iter().copied());
        }
        us.push(u.clone());
        vs.push(v.clone());
    }
    let log_z = Matrix::from_fn(rows, cols, |i, j| scores.get(i, j) + u[i] + v[j]);
    (
        log_z,
        SinkhornTrace {
            log_mu: log_mu.to_vec(),
            log_nu: log_nu.to_vec(),
            us,
            vs,
        },
    )
}

/// Reverse pass of [`log_sinkhorn`]: maps `dL/d(log Z)` to `dL/d(scores)`.
pub fn log_sinkhorn_backward(scores: &Matrix, trace: &SinkhornTrace, grad: &Matrix) -> Matrix {
    let (rows, cols) = scores.shape();
    let iters = trace.us.len();
    let mut g_scores = grad.clone();
    if iters == 0 {
        return g_scores;
    }
    let mut g_u = grad.row_sums();
    let mut g_v = grad.col_sums();
    let zero_v = vec![0.0; cols];
    for t in (0..iters).rev() {
        let u = &trace.us[t];
        let v = &trace.vs[t];
        // v_t = log_nu - lse_cols(S + u_t)
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                let p = (scores.get(i, j) + u[i] + v[j] - trace.log_nu[j]).exp();
                let d = p * g_v[j];
                acc += d;
                g_scores.as_mut_slice()[i * cols + j] -= d;
            }
            g_u[i] -= acc;
        }
        // u_t = log_mu - lse_rows(S + v_{t-1})
        let v_prev = if t == 0 { &zero_v } else { &trace.vs[t - 1] };
        let mut next_g_v = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                let q = (scores.get(i, j) + v_prev[j] + u[i] - trace.log_mu[i]).exp();
                let d = q * g_u[i];
                next_g_v[j] -= d;
                g_scores.as_mut_slice()[i * cols + j] -= d;
            }
        }
        g_v = next_g_v;
        g_u.iter_mut().for_each(|x| *x = 0.0);
    }
    g_scores
}
