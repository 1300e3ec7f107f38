//! Small dense linear-algebra helpers shared by the fitting code.
//!
//! Every inverse of a covariance or precision matrix goes through a Cholesky
//! factorization, and results are symmetrized to suppress drift.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{GlmmError, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GlmmError::NonFinite(context.to_string()));
    }
    Cholesky::new(m.clone()).ok_or_else(|| GlmmError::NotPositiveDefinite(context.to_string()))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky(m, context)?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn spd_logdet(m: &DMatrix<f64>, context: &str) -> Result<f64> {
    let chol = cholesky(m, context)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && Cholesky::new(m.clone()).is_some()
}

/// `v' M v`.
pub fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (m * v).dot(v)
}

/// `x' M x` for the `row`th row of `x`.
pub fn row_quad_form(x: &DMatrix<f64>, row: usize, m: &DMatrix<f64>) -> f64 {
    let k = x.ncols();
    let mut acc = 0.0;
    for a in 0..k {
        let xa = x[(row, a)];
        if xa == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for b in 0..k {
            inner += m[(a, b)] * x[(row, b)];
        }
        acc += xa * inner;
    }
    acc
}

/// `X' diag(w) X`.
pub fn weighted_crossprod(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let k = x.ncols();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..k {
            let xa = x[(i, a)] * wi;
            if xa == 0.0 {
                continue;
            }
            for b in a..k {
                out[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// Multivariate log-gamma `log Γ_d(x)`.
pub fn ln_multigamma(d: usize, x: f64) -> f64 {
    let df = d as f64;
    let mut acc = df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=d {
        acc += ln_gamma(x + (1.0 - j as f64) / 2.0);
    }
    acc
}

/// `E[log|D|]` for `D ~ IW(nu, S)` with density proportional to
/// `|D|^{-(nu+d+1)/2} exp(-tr(S D^{-1})/2)`.
pub fn iw_expected_logdet(nu: f64, s_logdet: f64, d: usize) -> f64 {
    let mut acc = s_logdet - d as f64 * std::f64::consts::LN_2;
    for j in 1..=d {
        acc -= digamma((nu - j as f64 + 1.0) / 2.0);
    }
    acc
}
