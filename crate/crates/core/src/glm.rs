//! Weighted maximum-likelihood logistic regression by Newton-Raphson (IRLS)
//! with step halving.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{cholesky_solve, dependent_columns, dot, Matrix};
use crate::math::{exp, expit, fabs, log1p, logit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("design has {rows} rows but {found} {what}")]
    Dimension { rows: usize, found: usize, what: &'static str },
    #[error("weights must be finite and non-negative (row {0})")]
    InvalidWeight(usize),
    #[error("responses must lie in [0, 1] (row {0})")]
    InvalidResponse(usize),
    #[error("design is rank deficient on the weighted support; dependent columns {0:?}")]
    Singular(Vec<usize>),
    #[error("no convergence after {iterations} iterations (max |score| = {max_abs_score:e})")]
    NotConverged { iterations: usize, coef: Vec<f64>, max_abs_score: f64 },
    #[error("separation detected: {0}")]
    Separation(String),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitResult {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    /// `X' diag(w p (1 - p)) X` at the solution.
    pub info_matrix: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Convergence requires `max |score| < score_tol * sum(w)`.
    pub score_tol: f64,
    /// ...and a Newton step with `max |delta| < step_tol`.
    pub step_tol: f64,
    /// A linear predictor beyond this magnitude signals separation.
    pub separation_eta: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { max_iter: 100, score_tol: 1e-8, step_tol: 1e-10, separation_eta: 30.0 }
    }
}

struct Eval {
    loglik: f64,
    score: Vec<f64>,
    info: Matrix,
    max_eta: f64,
}

fn evaluate(x: &Matrix, y: &[f64], w: &[f64], coef: &[f64]) -> Eval {
    let q = x.cols();
    let mut loglik = 0.0;
    let mut score = vec![0.0; q];
    let mut info = Matrix::zeros(q, q);
    let mut max_eta: f64 = 0.0;
    for i in 0..x.rows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        let eta = dot(row, coef);
        max_eta = max_eta.max(fabs(eta));
        let e = exp(-fabs(eta));
        let p = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        loglik += wi * (y[i] * eta - (eta.max(0.0) + log1p(e)));
        let resid = wi * (y[i] - p);
        let v = wi * p * (1.0 - p);
        for a in 0..q {
            score[a] += resid * row[a];
            let va = v * row[a];
            if va != 0.0 {
                let info_row = info.row_mut(a);
                for b in a..q {
                    info_row[b] += va * row[b];
                }
            }
        }
    }
    info.symmetrize_from_upper();
    Eval { loglik, score, info, max_eta }
}

/// Weighted log-likelihood `sum w [y eta - log(1 + exp(eta))]`.
pub fn log_likelihood(x: &Matrix, y: &[f64], w: &[f64], coef: &[f64]) -> f64 {
    evaluate(x, y, w, coef).loglik
}

/// Weighted score `sum w (y - expit(eta)) x`.
pub fn score(x: &Matrix, y: &[f64], w: &[f64], coef: &[f64]) -> Vec<f64> {
    evaluate(x, y, w, coef).score
}

pub fn fit_weighted_logistic(design: &Matrix, y: &[f64], w: &[f64]) -> Result<FitResult, GlmError> {
    fit_weighted_logistic_with(design, y, w, &GlmOptions::default())
}

pub fn fit_weighted_logistic_with(
    design: &Matrix,
    y: &[f64],
    w: &[f64],
    opts: &GlmOptions,
) -> Result<FitResult, GlmError> {
    let (n, q) = (design.rows(), design.cols());
    if y.len() != n {
        return Err(GlmError::Dimension { rows: n, found: y.len(), what: "responses" });
    }
    if w.len() != n {
        return Err(GlmError::Dimension { rows: n, found: w.len(), what: "weights" });
    }
    if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GlmError::InvalidWeight(i));
    }
    if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(GlmError::InvalidResponse(i));
    }
    let total: f64 = w.iter().sum();
    let events: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
    if events <= 0.0 || events >= total {
        return Err(GlmError::Separation(alloc::format!(
            "weighted outcome total {events} of {total}: the response does not vary"
        )));
    }

    // Rank check on X'WX.
    let mut xtwx = Matrix::zeros(q, q);
    for i in 0..n {
        let row = design.row(i);
        for a in 0..q {
            let va = w[i] * row[a];
            for b in a..q {
                xtwx[(a, b)] += va * row[b];
            }
        }
    }
    xtwx.symmetrize_from_upper();
    let dep = dependent_columns(&xtwx, 1e-10);
    if !dep.is_empty() {
        return Err(GlmError::Singular(dep));
    }

    let mut coef = vec![0.0; q];
    if q > 0 && (0..n).all(|i| design[(i, 0)] == 1.0) {
        coef[0] = logit(events / total);
    }
    let mut cur = evaluate(design, y, w, &coef);
    for iter in 0..opts.max_iter {
        let max_score = cur.score.iter().fold(0.0_f64, |m, s| m.max(fabs(*s)));
        let delta = match cholesky_solve(&cur.info, &cur.score) {
            Some(d) => d,
            None => return Err(GlmError::Singular(dependent_columns(&cur.info, 1e-12))),
        };
        let max_delta = delta.iter().fold(0.0_f64, |m, d| m.max(fabs(*d)));
        if max_score < opts.score_tol * total && max_delta < opts.step_tol {
            return Ok(FitResult {
                coef,
                converged: true,
                iterations: iter,
                max_abs_score: max_score,
                info_matrix: cur.info,
            });
        }
        let mut step = 1.0;
        let next = loop {
            let cand: Vec<f64> = coef.iter().zip(&delta).map(|(c, d)| c + step * d).collect();
            let ev = evaluate(design, y, w, &cand);
            if ev.loglik >= cur.loglik - 1e-12 * fabs(cur.loglik) || step < 1e-10 {
                break (cand, ev);
            }
            step *= 0.5;
        };
        coef = next.0;
        cur = next.1;
        if cur.max_eta > opts.separation_eta {
            return Err(GlmError::Separation(alloc::format!(
                "linear predictor reached {:.1} at iteration {}",
                cur.max_eta,
                iter + 1
            )));
        }
    }
    let max_abs_score = cur.score.iter().fold(0.0_f64, |m, s| m.max(fabs(*s)));
    Err(GlmError::NotConverged { iterations: opts.max_iter, coef, max_abs_score })
}

/// `expit(row . coef)`.
pub fn predict_prob(fit: &FitResult, row: &[f64]) -> f64 {
    expit(dot(row, &fit.coef))
}
