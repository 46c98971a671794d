//! Total-variation regularized differentiation.
//!
//! The unknown is the smoothed signal `v` sampled at the nodes, with the
//! derivative on each interval given by its slope `u_j = (v_{j+1} − v_j)/h_j`.
//! This is the integral formulation `v = v₀ + A u` with the integration
//! constant left free, so a noisy first sample does not bias the fit:
//!
//! `J(v) = ½‖v − f‖² + α Σ_j h̄_j √((u_{j+1} − u_j)² + ε)`
//!
//! where `h̄_j` is the mean of the two intervals meeting at node `j + 1`, so
//! the penalty scales with the sampling step as in the usual discretization.
//!
//! Each lagged-diffusivity step freezes the weights `1/√(Δu² + ε)` and solves
//! the resulting banded SPD system. That step minimizes a quadratic majorizer
//! of `J`, so the objective never increases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvOptions {
    /// Regularization weight; `None` uses `1e-2·std(values)`.
    pub reg_weight: Option<f64>,
    pub iters: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
}

impl Default for TvOptions {
    fn default() -> Self {
        Self {
            reg_weight: None,
            iters: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TvResult {
    /// Derivative at the nodes.
    pub derivative: Vec<f64>,
    /// Smoothed signal at the nodes.
    pub smoothed: Vec<f64>,
    /// Objective before the first and after every iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn slopes(v: &[f64], h: &[f64]) -> Vec<f64> {
    v.windows(2).zip(h).map(|(w, h)| (w[1] - w[0]) / h).collect()
}

fn objective(v: &[f64], f: &[f64], h: &[f64], alpha: f64, eps: f64) -> f64 {
    let u = slopes(v, h);
    let fit: f64 = v.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * 0.5;
    let tv: f64 = u
        .windows(2)
        .zip(h.windows(2))
        .map(|(w, h)| 0.5 * (h[0] + h[1]) * ((w[1] - w[0]).powi(2) + eps).sqrt())
        .sum();
    fit + alpha * tv
}

/// Solves a symmetric positive definite pentadiagonal system in place by
/// banded Cholesky. `d`, `e1`, `e2` hold the main, first and second
/// diagonals (`e1[i] = A[i][i+1]`, `e2[i] = A[i][i+2]`).
fn solve_penta(mut d: Vec<f64>, mut e1: Vec<f64>, mut e2: Vec<f64>, b: &mut [f64]) -> Result<()> {
    let n = d.len();
    // Factor A = L Lᵀ, storing L's band in (d, e1, e2) as columns below the diagonal.
    for i in 0..n {
        if i >= 1 {
            let l1 = e1[i - 1];
            d[i] -= l1 * l1;
            if i >= 2 {
                d[i] -= e2[i - 2] * e2[i - 2];
            }
        }
        if !(d[i] > 0.0) {
            return Err(Error::Singular(format!("TV system lost definiteness at row {i}")));
        }
        d[i] = d[i].sqrt();
        if i + 1 < n {
            let mut a = e1[i];
            if i >= 1 {
                a -= e2[i - 1] * e1[i - 1];
            }
            e1[i] = a / d[i];
        }
        if i + 2 < n {
            e2[i] /= d[i];
        }
    }
    for i in 0..n {
        let mut s = b[i];
        if i >= 1 {
            s -= e1[i - 1] * b[i - 1];
        }
        if i >= 2 {
            s -= e2[i - 2] * b[i - 2];
        }
        b[i] = s / d[i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        if i + 1 < n {
            s -= e1[i] * b[i + 1];
        }
        if i + 2 < n {
            s -= e2[i] * b[i + 2];
        }
        b[i] = s / d[i];
    }
    Ok(())
}

fn node_derivative(u: &[f64], h: &[f64]) -> Vec<f64> {
    let m = u.len();
    let mut d = Vec::with_capacity(m + 1);
    d.push(u[0]);
    for j in 1..m {
        d.push((h[j] * u[j - 1] + h[j - 1] * u[j]) / (h[j - 1] + h[j]));
    }
    d.push(u[m - 1]);
    d
}

/// Derivative of a noisy series by TV regularization.
///
/// Non-convergence within `iters` is reported through `converged`; the
/// last iterate is the best one since the objective is monotone.
pub fn tv_differentiate(values: &[f64], times: &[f64], opts: &TvOptions) -> Result<TvResult> {
    let n = values.len();
    if n != times.len() {
        return Err(Error::dim(format!("{n} values for {} times", times.len())));
    }
    if n < 3 {
        return Err(Error::usage("TV differentiation needs at least 3 samples"));
    }
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if h.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::usage("times must be strictly increasing"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value in TV input"));
    }
    let alpha = opts.reg_weight.unwrap_or_else(|| 1e-2 * std_dev(values));
    if !(alpha >= 0.0) {
        return Err(Error::config(format!("regularization weight must be ≥ 0, got {alpha}")));
    }
    let raw = slopes(values, &h);
    let slope_scale = raw.iter().fold(0.0f64, |m, u| m.max(u.abs())).max(f64::MIN_POSITIVE);
    let eps = (1e-6 * slope_scale).powi(2);

    let mut v = values.to_vec();
    let mut history = vec![objective(&v, values, &h, alpha, eps)];
    let mut converged = alpha == 0.0;
    let m = n - 2;
    for _ in 0..opts.iters {
        if converged {
            break;
        }
        let u = slopes(&v, &h);
        let mut d = vec![1.0; n];
        let mut e1 = vec![0.0; n - 1];
        let mut e2 = vec![0.0; n - 2];
        for k in 0..m {
            let w = alpha * 0.5 * (h[k] + h[k + 1]) / ((u[k + 1] - u[k]).powi(2) + eps).sqrt();
            let c = [1.0 / h[k], -1.0 / h[k] - 1.0 / h[k + 1], 1.0 / h[k + 1]];
            for a in 0..3 {
                d[k + a] += w * c[a] * c[a];
            }
            e1[k] += w * c[0] * c[1];
            e1[k + 1] += w * c[1] * c[2];
            e2[k] += w * c[0] * c[2];
        }
        let mut next = values.to_vec();
        solve_penta(d, e1, e2, &mut next)?;
        let j = objective(&next, values, &h, alpha, eps);
        let prev = *history.last().unwrap();
        if j > prev {
            // Roundoff at the optimum; keep the better iterate.
            converged = true;
            break;
        }
        v = next;
        history.push(j);
        if (prev - j) <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
        }
    }
    if !converged {
        log::warn!("TV differentiation did not converge in {} iterations", opts.iters);
    }
    let u = slopes(&v, &h);
    Ok(TvResult {
        derivative: node_derivative(&u, &h),
        smoothed: v,
        objective: history,
        converged,
    })
}
