//! Prior/likelihood message decomposition of each cluster's variational
//! posterior and the conflict p-values built from it.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data_model::ClusterDesign;
use crate::error::{GlmmError, Result};
use crate::linalg::{spd_inverse, symmetrize, weighted_crossprod};
use crate::ncvmp::{compute_g_f, update_local_once, GlobalState, LocalState, Problem};

/// Likelihood precisions whose eigenvalue ratio falls below this are singular.
pub const SINGULAR_RATIO: f64 = 1e-12;
/// Relative change in a local mean that marks it as not optimized.
pub const STALE_TOL: f64 = 1e-4;
pub const DEFAULT_LEVEL: f64 = 0.05;
const P_CLIP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
    #[default]
    TwoSided,
}

/// Gaussian messages reaching `α̃_i` from the prior and from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePair {
    pub mu_rep: DVector<f64>,
    pub sigma_rep: DMatrix<f64>,
    /// `None` when the likelihood precision is singular.
    pub mu_lik: Option<DVector<f64>>,
    pub lik_precision: DMatrix<f64>,
    /// `lik_precision · mu_lik`, always defined.
    pub lik_natural: DVector<f64>,
}

impl MessagePair {
    pub fn dim(&self) -> usize {
        self.mu_rep.len()
    }

    pub fn is_singular(&self) -> bool {
        self.mu_lik.is_none()
    }

    /// Mean and covariance of `α̃_rep − α̃_lik`.
    pub fn difference(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mu_lik = self.mu_lik.as_ref().ok_or_else(|| {
            GlmmError::InvalidData("likelihood precision is singular; conflict p-value undefined".into())
        })?;
        let sigma_lik = spd_inverse(&self.lik_precision, "likelihood precision")?;
        Ok((&self.mu_rep - mu_lik, symmetrize(&(&self.sigma_rep + sigma_lik))))
    }
}

/// `(W̃_i μ_β, S_D / ν_D)`.
pub fn prior_message(design: &ClusterDesign, global: &GlobalState) -> (DVector<f64>, DMatrix<f64>) {
    (&design.w_tilde * &global.mu_beta, &global.s_d / global.nu_d)
}

/// `(μ_lik, Z'FZ, Z'FZ μ_lik)` with `Z'FZ μ_lik = Z'FZ μ_i + Z'(y − g)`.
pub fn likelihood_message(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    local: &LocalState,
) -> (Option<DVector<f64>>, DMatrix<f64>, DVector<f64>) {
    let cl = &problem.dataset.clusters[i];
    let (g, f) = compute_g_f(problem, i, global, local);
    let precision = symmetrize(&weighted_crossprod(&cl.z, &f));
    let score = cl.z.transpose() * (&cl.y - &g);
    let natural = &precision * &local.mu + &score;
    let mu = if is_nonsingular(&precision) {
        precision
            .clone()
            .cholesky()
            .map(|chol| &local.mu + chol.solve(&score))
    } else {
        None
    };
    (mu, precision, natural)
}

fn is_nonsingular(m: &DMatrix<f64>) -> bool {
    let eig = m.symmetric_eigenvalues();
    let max = eig.max();
    max > 0.0 && eig.min() > SINGULAR_RATIO * max
}

pub fn message_pair(problem: &Problem, i: usize, global: &GlobalState, local: &LocalState) -> MessagePair {
    let (mu_rep, sigma_rep) = prior_message(&problem.designs[i], global);
    let (mu_lik, lik_precision, lik_natural) = likelihood_message(problem, i, global, local);
    MessagePair {
        mu_rep,
        sigma_rep,
        mu_lik,
        lik_precision,
        lik_natural,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarPValues {
    pub lower: f64,
    pub upper: f64,
    pub two_sided: f64,
}

impl ScalarPValues {
    pub fn side(&self, side: Side) -> f64 {
        match side {
            Side::Lower => self.lower,
            Side::Upper => self.upper,
            Side::TwoSided => self.two_sided,
        }
    }
}

/// Standard normal CDF from the complementary error function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile, polished by one Newton step on [`norm_cdf`].
pub fn norm_quantile(p: f64) -> f64 {
    let x = Normal::standard().inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    let dens = norm_pdf(x);
    if dens > 0.0 {
        x - (norm_cdf(x) - p) / dens
    } else {
        x
    }
}

/// Tail probabilities of `d + s Z` around zero. The smaller tail is evaluated
/// directly and the other as its complement, so `lower + upper == 1`.
pub fn normal_tails(d: f64, s: f64) -> ScalarPValues {
    let (lower, upper) = if d >= 0.0 {
        let lower = norm_cdf(-d / s);
        (lower, 1.0 - lower)
    } else {
        let upper = norm_cdf(d / s);
        (1.0 - upper, upper)
    };
    ScalarPValues {
        lower,
        upper,
        two_sided: (2.0 * lower.min(upper)).min(1.0),
    }
}

/// Scalar conflict p-values for `r = 1`.
pub fn conflict_pvalue_scalar(pair: &MessagePair) -> Result<ScalarPValues> {
    if pair.dim() != 1 {
        return Err(GlmmError::InvalidConfig(format!(
            "scalar conflict p-values need r = 1, got r = {}",
            pair.dim()
        )));
    }
    let (d, cov) = pair.difference()?;
    Ok(normal_tails(d[0], cov[(0, 0)].sqrt()))
}

/// `Δ = E(diff)' Cov(diff)^{-1} E(diff)` and `P(χ²_r > Δ)`.
pub fn conflict_pvalue_multivariate(pair: &MessagePair) -> Result<(f64, f64)> {
    let (d, cov) = pair.difference()?;
    let chol = crate::linalg::cholesky(&cov, "conflict covariance")?;
    let delta = d.dot(&chol.solve(&d)).max(0.0);
    Ok((delta, chi_square_tail(delta, pair.dim())))
}

/// `P(χ²_df > x)` from the closed form of the regularized upper incomplete
/// gamma function at integer and half-integer shape.
pub fn chi_square_tail(x: f64, df: usize) -> f64 {
    assert!(df > 0, "chi-square tail needs df >= 1");
    if x <= 0.0 {
        return 1.0;
    }
    if df % 2 == 0 {
        let half = 0.5 * x;
        let mut term = (-half).exp();
        let mut sum = term;
        for j in 1..df / 2 {
            term *= half / j as f64;
            sum += term;
        }
        sum.min(1.0)
    } else {
        let root = x.sqrt();
        let mut sum = libm::erfc(root / std::f64::consts::SQRT_2);
        let mut term = 2.0 * norm_pdf(root) * root;
        for j in 1..=(df - 1) / 2 {
            if j > 1 {
                term *= x / (2 * j - 1) as f64;
            }
            sum += term;
        }
        sum.min(1.0)
    }
}

/// Mean absolute difference of normal scores, `(1/n) Σ |Φ^{-1}(a) − Φ^{-1}(b)|`.
pub fn zscore_discrepancy(reference: &[f64], method: &[f64]) -> Result<f64> {
    if reference.len() != method.len() {
        return Err(GlmmError::InvalidData(format!(
            "p-value vectors differ in length ({} vs {})",
            reference.len(),
            method.len()
        )));
    }
    if reference.is_empty() {
        return Err(GlmmError::InvalidData("no p-values to compare".into()));
    }
    let mut clipped = false;
    let mut clip = |p: f64| {
        let c = p.clamp(P_CLIP, 1.0 - P_CLIP);
        clipped |= c != p;
        c
    };
    let mut total = 0.0;
    for (&a, &b) in reference.iter().zip(method) {
        if !(a.is_finite() && b.is_finite()) {
            return Err(GlmmError::NonFinite("p-value".into()));
        }
        total += (norm_quantile(clip(a)) - norm_quantile(clip(b))).abs();
    }
    if clipped {
        warn!("p-values outside [{P_CLIP}, {}] were clipped", 1.0 - P_CLIP);
    }
    Ok(total / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConflict {
    pub index: usize,
    pub id: String,
    pub messages: MessagePair,
    pub delta: Option<f64>,
    /// Present when `r = 1`.
    pub scalar: Option<ScalarPValues>,
    pub chi_square_p: Option<f64>,
    /// p-value the flag is based on: the configured side for `r = 1`, the
    /// χ² tail otherwise.
    pub p_value: Option<f64>,
    pub divergent: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub side: Side,
    pub level: f64,
    pub clusters: Vec<ClusterConflict>,
}

impl ConflictReport {
    pub fn flagged(&self) -> Vec<&ClusterConflict> {
        self.clusters.iter().filter(|c| c.divergent).collect()
    }
}

/// Errors when any local moves by more than `STALE_TOL` (relative) under one
/// more update at the given global state.
pub fn check_locals_current(problem: &Problem, global: &GlobalState, locals: &[LocalState]) -> Result<()> {
    if locals.len() != problem.n() {
        return Err(GlmmError::InvalidData(format!(
            "{} local states for {} clusters",
            locals.len(),
            problem.n()
        )));
    }
    let changes: Vec<Result<f64>> = (0..problem.n())
        .into_par_iter()
        .map(|i| {
            let next = update_local_once(problem, i, global, &locals[i])?;
            Ok((&next.mu - &locals[i].mu).norm() / locals[i].mu.norm().max(1.0))
        })
        .collect();
    for (i, change) in changes.into_iter().enumerate() {
        let change = change?;
        if change > STALE_TOL {
            return Err(GlmmError::StaleLocals { cluster: i, change });
        }
    }
    Ok(())
}

fn diagnose_cluster(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    local: &LocalState,
    side: Side,
    level: f64,
) -> Result<ClusterConflict> {
    let messages = message_pair(problem, i, global, local);
    let id = problem.dataset.clusters[i].id.clone();
    if messages.is_singular() {
        return Ok(ClusterConflict {
            index: i,
            id,
            messages,
            delta: None,
            scalar: None,
            chi_square_p: None,
            p_value: None,
            divergent: false,
            note: Some("likelihood precision singular; p-value undefined".into()),
        });
    }
    let (delta, chi) = conflict_pvalue_multivariate(&messages)?;
    let scalar = if messages.dim() == 1 {
        Some(conflict_pvalue_scalar(&messages)?)
    } else {
        None
    };
    let p_value = scalar.map_or(chi, |s| s.side(side));
    Ok(ClusterConflict {
        index: i,
        id,
        messages,
        delta: Some(delta),
        scalar,
        chi_square_p: Some(chi),
        p_value: Some(p_value),
        divergent: p_value < level,
        note: None,
    })
}

/// Conflict diagnostics for every cluster at a fitted state whose locals
/// are all optimized.
pub fn diagnose_all(
    problem: &Problem,
    global: &GlobalState,
    locals: &[LocalState],
    side: Side,
    level: f64,
) -> Result<ConflictReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GlmmError::InvalidConfig(format!("significance level {level} outside (0, 1)")));
    }
    check_locals_current(problem, global, locals)?;
    let clusters = (0..problem.n())
        .into_par_iter()
        .map(|i| diagnose_cluster(problem, i, global, &locals[i], side, level))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConflictReport { side, level, clusters })
}
