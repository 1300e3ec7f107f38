//! Variational state, local and global message-passing updates, the evidence
//! lower bound and the full-data fitting loop.

use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    build_parametrization, fit_pooled_glm, kass_prior_guess, ClusterDesign, ColumnPartition, Dataset, Family,
    ParametrizationKind, PriorSpec, ETA_CLAMP,
};
use crate::error::{GlmmError, Result};
use crate::linalg::{
    cholesky, iw_expected_logdet, ln_multigamma, row_quad_form, spd_inverse, spd_logdet, symmetrize,
    weighted_crossprod,
};
use crate::quadrature::Quadrature;

/// Batches at least this large are processed on the rayon pool.
const PARALLEL_MIN_BATCH: usize = 64;

/// A lower-bound drop beyond this triggers damping when it is enabled.
const DAMPING_TRIGGER: f64 = 10.0;

const POLISH_TOL: f64 = 1e-12;
const POLISH_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub mu_beta: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    /// Inverse of `sigma_beta`, kept alongside it to avoid repeated inversion.
    pub precision_beta: DMatrix<f64>,
    pub nu_d: f64,
    pub s_d: DMatrix<f64>,
}

impl GlobalState {
    /// `ν_q S_q^{-1}`, the expected precision of the random effects.
    pub fn d_precision(&self) -> Result<DMatrix<f64>> {
        Ok(spd_inverse(&self.s_d, "inverse-Wishart scale")? * self.nu_d)
    }

    /// Posterior mean of `D`, defined when `ν_q > r + 1`.
    pub fn d_mean(&self) -> Option<DMatrix<f64>> {
        let denom = self.nu_d - self.s_d.nrows() as f64 - 1.0;
        (denom > 0.0).then(|| &self.s_d / denom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalState {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Covariance guess `D` and predictor `η_i` behind the tuning matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TuningSource {
    /// `D = R̂` and `η_i = X_i β̂` from the pooled GLM.
    #[default]
    PriorGuess,
    /// `D` and `β` from a full-data pilot fit in the centered parametrization.
    Pilot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub parametrization: ParametrizationKind,
    /// Source of the covariance guess used to build the tuning matrices.
    pub tuning: TuningSource,
    /// Prior variance of each fixed effect.
    pub prior_beta_variance: f64,
    /// Inverse-Wishart degrees of freedom; defaults to `r`.
    pub prior_nu: Option<f64>,
    /// Inflation factor applied to the default scale guess.
    pub prior_c: f64,
    /// Explicit inverse-Wishart scale, overriding `nu · R̂`.
    pub prior_s: Option<DMatrix<f64>>,
    pub quadrature_order: usize,
    pub local_tol: f64,
    pub max_local_iter: usize,
    pub stop_tol: f64,
    pub switch_tol: f64,
    pub max_sweeps: usize,
    pub damping: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Indices of fixed-effect columns to treat as subject specific.
    pub subject_specific: Option<Vec<usize>>,
    pub batch_size: Option<usize>,
    pub step_a: f64,
    #[serde(rename = "step_A")]
    pub step_big_a: f64,
    pub step_alpha: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            parametrization: ParametrizationKind::Partial,
            tuning: TuningSource::PriorGuess,
            prior_beta_variance: 1000.0,
            prior_nu: None,
            prior_c: 1.0,
            prior_s: None,
            quadrature_order: crate::quadrature::DEFAULT_ORDER,
            local_tol: 0.05,
            max_local_iter: 50,
            stop_tol: 1e-6,
            switch_tol: 1e-3,
            max_sweeps: 1000,
            damping: 1.0,
            seed: 0,
            deterministic: true,
            subject_specific: None,
            batch_size: None,
            step_a: 1.0,
            step_big_a: 1.0,
            step_alpha: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GlmmError::InvalidConfig(m.to_string()));
        if !(self.local_tol > 0.0) {
            return bad("local_tol must be positive");
        }
        if !(self.stop_tol > 0.0 && self.stop_tol.is_finite()) || !(self.switch_tol > 0.0) {
            return bad("stop_tol and switch_tol must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if self.max_sweeps == 0 || self.max_local_iter == 0 {
            return bad("iteration limits must be positive");
        }
        if !(self.prior_beta_variance > 0.0 && self.prior_beta_variance.is_finite()) {
            return bad("prior_beta_variance must be positive");
        }
        if !(self.step_a > 0.0) || !(self.step_big_a >= 0.0) {
            return bad("step_a must be positive and step_A nonnegative");
        }
        if !(self.step_alpha > 0.5 && self.step_alpha <= 1.0) {
            return bad("step_alpha must lie in (0.5, 1]");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        if self.quadrature_order == 0 || self.quadrature_order > crate::quadrature::MAX_RULE_ORDER {
            return bad("quadrature_order must lie in 1..=100");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stochastic,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub sweep: usize,
    pub lower_bound: f64,
    /// Step size of the last global update in the sweep.
    pub step_size: f64,
    pub elapsed_secs: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub global: GlobalState,
    pub locals: Vec<LocalState>,
    pub trace: Vec<TraceEntry>,
    /// Lower bound of the returned state, after the final local pass.
    pub lower_bound: f64,
    pub stochastic_sweeps: usize,
    pub full_cycles: usize,
    pub local_updates: usize,
    pub switched_at: Option<usize>,
    pub lower_bound_decreases: usize,
    pub converged: bool,
    pub elapsed_secs: f64,
}

/// Everything fixed for the duration of a fit.
#[derive(Debug, Clone)]
pub struct Problem {
    pub dataset: Dataset,
    pub family: Family,
    pub kind: ParametrizationKind,
    pub partition: ColumnPartition,
    pub designs: Vec<ClusterDesign>,
    pub priors: PriorSpec,
    pub quadrature: Quadrature,
    pub beta_hat: DVector<f64>,
    pub beta_hat_cov: DMatrix<f64>,
    pub r_hat: DMatrix<f64>,
    /// Covariance guess the tuning matrices were built from.
    pub tuning_d: DMatrix<f64>,
    pub deterministic: bool,
    prior_precision: DMatrix<f64>,
    prior_logdet: f64,
}

impl Problem {
    /// Pooled-GLM fit, default prior guess and per-cluster parametrization.
    pub fn new(dataset: Dataset, family: Family, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        let partition = ColumnPartition::resolve(&dataset, config.subject_specific.as_deref())?;
        let (beta_hat, beta_hat_cov) = fit_pooled_glm(&dataset, family)?;
        let r_hat = kass_prior_guess(&dataset, family, &beta_hat, config.prior_c)?;
        let (p, r) = (dataset.p, dataset.r);
        let nu = config.prior_nu.unwrap_or(r as f64);
        let priors = PriorSpec {
            sigma_beta: DMatrix::identity(p, p) * config.prior_beta_variance,
            nu,
            s: config.prior_s.clone().unwrap_or_else(|| &r_hat * r as f64),
            c: config.prior_c,
        };
        priors.validate(p, r)?;
        let designs = build_parametrization(&dataset, &partition, config.parametrization, &r_hat, &beta_hat, family)?;
        let mut problem =
            Self::assemble(dataset, family, config, partition, designs, priors, beta_hat, beta_hat_cov, r_hat)?;
        if config.tuning == TuningSource::Pilot && config.parametrization == ParametrizationKind::Partial {
            problem.retune_from_pilot(config)?;
        }
        Ok(problem)
    }

    /// Rebuilds the tuning matrices from a centered-parametrization pilot fit.
    fn retune_from_pilot(&mut self, config: &FitConfig) -> Result<()> {
        let pilot_config = FitConfig {
            parametrization: ParametrizationKind::Centered,
            tuning: TuningSource::PriorGuess,
            ..config.clone()
        };
        let mut pilot = self.clone();
        pilot.kind = ParametrizationKind::Centered;
        pilot.designs = build_parametrization(
            &self.dataset,
            &self.partition,
            ParametrizationKind::Centered,
            &self.r_hat,
            &self.beta_hat,
            self.family,
        )?;
        let fit = fit_ncvmp(&pilot, &pilot_config)?;
        let d = fit.global.d_mean().unwrap_or_else(|| &fit.global.s_d / fit.global.nu_d);
        info!("tuning matrices rebuilt from a {}-cycle centered pilot fit", fit.full_cycles);
        self.designs = build_parametrization(
            &self.dataset,
            &self.partition,
            ParametrizationKind::Partial,
            &d,
            &fit.global.mu_beta,
            self.family,
        )?;
        self.tuning_d = d;
        Ok(())
    }

    /// Rebuilds a problem from previously computed parametrization artifacts.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        dataset: Dataset,
        family: Family,
        config: &FitConfig,
        partition: ColumnPartition,
        designs: Vec<ClusterDesign>,
        priors: PriorSpec,
        beta_hat: DVector<f64>,
        beta_hat_cov: DMatrix<f64>,
        r_hat: DMatrix<f64>,
    ) -> Result<Self> {
        if designs.len() != dataset.n() {
            return Err(GlmmError::InvalidData("one design per cluster is required".into()));
        }
        priors.validate(dataset.p, dataset.r)?;
        let prior_precision = spd_inverse(&priors.sigma_beta, "prior covariance of beta")?;
        let prior_logdet = spd_logdet(&priors.sigma_beta, "prior covariance of beta")?;
        Ok(Problem {
            dataset,
            family,
            kind: config.parametrization,
            partition,
            designs,
            priors,
            quadrature: Quadrature::new(config.quadrature_order)?,
            beta_hat,
            beta_hat_cov,
            tuning_d: r_hat.clone(),
            r_hat,
            deterministic: config.deterministic,
            prior_precision,
            prior_logdet,
        })
    }

    pub fn n(&self) -> usize {
        self.dataset.n()
    }

    pub fn prior_precision(&self) -> &DMatrix<f64> {
        &self.prior_precision
    }

    /// GLM-based starting point: `q(β)` from the pooled fit, `E(D) = R̂`,
    /// and `μ_i = W̃_i μ_β`, `Σ_i = R̂` for every cluster.
    pub fn initial_state(&self) -> Result<(GlobalState, Vec<LocalState>)> {
        let r = self.dataset.r as f64;
        let nu_d = self.priors.nu + self.n() as f64;
        let s_d = if nu_d > r + 1.0 {
            &self.r_hat * (nu_d - r - 1.0)
        } else {
            warn!("inverse-Wishart mean undefined at initialization; starting from S = R̂");
            self.r_hat.clone()
        };
        let global = GlobalState {
            mu_beta: self.beta_hat.clone(),
            sigma_beta: self.beta_hat_cov.clone(),
            precision_beta: spd_inverse(&self.beta_hat_cov, "initial covariance of beta")?,
            nu_d,
            s_d,
        };
        let locals = self
            .designs
            .iter()
            .map(|d| LocalState {
                mu: &d.w_tilde * &global.mu_beta,
                sigma: self.r_hat.clone(),
            })
            .collect();
        Ok((global, locals))
    }
}

/// Mean and variance of each linear predictor under `q`.
pub fn predictor_moments(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    local: &LocalState,
) -> (DVector<f64>, DVector<f64>) {
    let cl = &problem.dataset.clusters[i];
    let des = &problem.designs[i];
    let m = &des.v * &global.mu_beta + &cl.z * &local.mu;
    let v = DVector::from_fn(cl.len(), |j, _| {
        row_quad_form(&des.v, j, &global.sigma_beta) + row_quad_form(&cl.z, j, &local.sigma)
    });
    (m, v)
}

/// `g_i` and the diagonal of `F_i`.
pub fn compute_g_f(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    local: &LocalState,
) -> (DVector<f64>, DVector<f64>) {
    let (m, v) = predictor_moments(problem, i, global, local);
    let cl = &problem.dataset.clusters[i];
    match problem.family {
        Family::Poisson => {
            let g = DVector::from_fn(cl.len(), |j, _| {
                (cl.log_offset(j) + (m[j] + 0.5 * v[j]).clamp(-ETA_CLAMP, ETA_CLAMP)).exp()
            });
            (g.clone(), g)
        }
        Family::Bernoulli => {
            let mut g = DVector::zeros(cl.len());
            let mut f = DVector::zeros(cl.len());
            for j in 0..cl.len() {
                let (b1, b2) = problem.quadrature.b_first_second(m[j], v[j].max(0.0).sqrt());
                g[j] = b1;
                f[j] = b2;
            }
            (g, f)
        }
    }
}

/// One local update given the expected random-effects precision `d_prec`.
pub fn update_local_with(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    d_prec: &DMatrix<f64>,
    local: &LocalState,
) -> Result<LocalState> {
    let cl = &problem.dataset.clusters[i];
    let des = &problem.designs[i];
    let (g, f) = compute_g_f(problem, i, global, local);
    let precision = d_prec + weighted_crossprod(&cl.z, &f);
    let chol = cholesky(&precision, "local precision").map_err(|e| GlmmError::ClusterNumerics {
        cluster: i,
        context: e.to_string(),
    })?;
    let sigma = symmetrize(&chol.inverse());
    let prior_resid = &local.mu - &des.w_tilde * &global.mu_beta;
    let direction = cl.z.transpose() * (&cl.y - &g) - d_prec * prior_resid;
    let mu = &local.mu + &sigma * direction;
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(GlmmError::ClusterNumerics {
            cluster: i,
            context: "non-finite local mean".into(),
        });
    }
    Ok(LocalState { mu, sigma })
}

pub fn update_local_once(problem: &Problem, i: usize, global: &GlobalState, local: &LocalState) -> Result<LocalState> {
    update_local_with(problem, i, global, &global.d_precision()?, local)
}

/// Repeats local updates over `batch` until the batch-level relative change
/// `||Δμ_B|| / ||μ_B||` drops below `tol`. Returns the number of repetitions.
pub fn optimize_batch(
    problem: &Problem,
    batch: &[usize],
    global: &GlobalState,
    locals: &mut [LocalState],
    tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let d_prec = global.d_precision()?;
    for rep in 1..=max_iter {
        let updated: Vec<Result<LocalState>> = if batch.len() >= PARALLEL_MIN_BATCH {
            batch
                .par_iter()
                .map(|&i| update_local_with(problem, i, global, &d_prec, &locals[i]))
                .collect()
        } else {
            batch
                .iter()
                .map(|&i| update_local_with(problem, i, global, &d_prec, &locals[i]))
                .collect()
        };
        let (mut change, mut size) = (0.0, 0.0);
        for (&i, new) in batch.iter().zip(updated) {
            let new = new?;
            change += (&new.mu - &locals[i].mu).norm_squared();
            size += new.mu.norm_squared();
            locals[i] = new;
        }
        if tol.is_infinite() || change == 0.0 || change.sqrt() < tol * size.sqrt() {
            return Ok(rep);
        }
    }
    warn!("local updates reached {max_iter} repetitions without meeting tolerance {tol}");
    Ok(max_iter)
}

/// Single-cluster form of [`optimize_batch`].
pub fn optimize_local(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    local: &LocalState,
    tol: f64,
    max_iter: usize,
) -> Result<(LocalState, usize)> {
    let d_prec = global.d_precision()?;
    let mut cur = local.clone();
    for rep in 1..=max_iter {
        let new = update_local_with(problem, i, global, &d_prec, &cur)?;
        let change = (&new.mu - &cur.mu).norm();
        let size = new.mu.norm();
        cur = new;
        if tol.is_infinite() || change == 0.0 || change < tol * size {
            return Ok((cur, rep));
        }
    }
    warn!("local updates for cluster {i} reached {max_iter} repetitions");
    Ok((cur, max_iter))
}

/// Per-cluster pieces of the global update.
#[derive(Debug, Clone)]
struct Contribution {
    precision: DMatrix<f64>,
    gradient: DVector<f64>,
    scale: DMatrix<f64>,
}

fn contribution(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    d_prec: &DMatrix<f64>,
    local: &LocalState,
) -> Contribution {
    let cl = &problem.dataset.clusters[i];
    let des = &problem.designs[i];
    let (g, f) = compute_g_f(problem, i, global, local);
    let resid = &local.mu - &des.w_tilde * &global.mu_beta;
    let dw = d_prec * &des.w_tilde;
    let precision = des.w_tilde.transpose() * &dw + weighted_crossprod(&des.v, &f);
    let gradient = dw.transpose() * &resid + des.v.transpose() * (&cl.y - &g);
    let scale = &resid * resid.transpose() + &local.sigma + &des.w_tilde * &global.sigma_beta * des.w_tilde.transpose();
    Contribution {
        precision,
        gradient,
        scale,
    }
}

/// Unbiased estimate of the global natural parameters from a mini-batch.
///
/// `precision` and `linear = precision · μ_β + gradient` are the natural
/// parameters of `q(β)`; `scale` and `nu_d` those of `q(D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalEstimate {
    pub precision: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub nu_d: f64,
}

impl NaturalEstimate {
    pub fn linear(&self, mu_beta: &DVector<f64>) -> DVector<f64> {
        &self.precision * mu_beta + &self.gradient
    }
}

/// Batch sums are taken in the order of `batch` and scaled by `n / |B|`.
pub fn natural_param_estimate(
    problem: &Problem,
    batch: &[usize],
    global: &GlobalState,
    locals: &[LocalState],
) -> Result<NaturalEstimate> {
    let (p, r) = (problem.dataset.p, problem.dataset.r);
    let d_prec = global.d_precision()?;
    let zero = || Contribution {
        precision: DMatrix::zeros(p, p),
        gradient: DVector::zeros(p),
        scale: DMatrix::zeros(r, r),
    };
    let add = |mut acc: Contribution, c: Contribution| {
        acc.precision += c.precision;
        acc.gradient += c.gradient;
        acc.scale += c.scale;
        acc
    };
    let one = |&i: &usize| contribution(problem, i, global, &d_prec, &locals[i]);
    let sum = if !problem.deterministic {
        batch.par_iter().map(one).reduce(zero, add)
    } else if batch.len() >= PARALLEL_MIN_BATCH {
        let parts: Vec<Contribution> = batch.par_iter().map(one).collect();
        parts.into_iter().fold(zero(), add)
    } else {
        batch.iter().map(one).fold(zero(), add)
    };
    let k = if batch.is_empty() {
        0.0
    } else {
        problem.n() as f64 / batch.len() as f64
    };
    Ok(NaturalEstimate {
        precision: symmetrize(&(&problem.prior_precision + sum.precision * k)),
        gradient: sum.gradient * k - &problem.prior_precision * &global.mu_beta,
        scale: symmetrize(&(&problem.priors.s + sum.scale * k)),
        nu_d: problem.priors.nu + problem.n() as f64,
    })
}

/// Convex combination of the current and estimated natural parameters.
pub fn apply_natural_step(global: &GlobalState, estimate: &NaturalEstimate, step: f64) -> Result<GlobalState> {
    if step == 0.0 {
        return Ok(global.clone());
    }
    let precision_beta = symmetrize(&(&global.precision_beta * (1.0 - step) + &estimate.precision * step));
    let chol = cholesky(&precision_beta, "precision of beta")?;
    let sigma_beta = symmetrize(&chol.inverse());
    let mu_beta = &global.mu_beta + chol.solve(&estimate.gradient) * step;
    let s_d = symmetrize(&(&global.s_d * (1.0 - step) + &estimate.scale * step));
    cholesky(&s_d, "inverse-Wishart scale")?;
    if mu_beta.iter().any(|v| !v.is_finite()) {
        return Err(GlmmError::NonFinite("mean of beta".into()));
    }
    Ok(GlobalState {
        mu_beta,
        sigma_beta,
        precision_beta,
        nu_d: estimate.nu_d,
        s_d,
    })
}

/// Stochastic natural-gradient step of the global parameters on `batch`.
pub fn stochastic_global_update(
    problem: &Problem,
    batch: &[usize],
    step: f64,
    global: &GlobalState,
    locals: &[LocalState],
) -> Result<GlobalState> {
    if !(0.0..=1.0).contains(&step) {
        return Err(GlmmError::InvalidConfig(format!("step size {step} outside [0, 1]")));
    }
    let estimate = natural_param_estimate(problem, batch, global, locals)?;
    apply_natural_step(global, &estimate, step)
}

/// Full-data global update: every cluster, unit step.
pub fn update_global_full(problem: &Problem, global: &GlobalState, locals: &[LocalState]) -> Result<GlobalState> {
    let all: Vec<usize> = (0..problem.n()).collect();
    stochastic_global_update(problem, &all, 1.0, global, locals)
}

fn cluster_bound_terms(
    problem: &Problem,
    i: usize,
    global: &GlobalState,
    d_prec: &DMatrix<f64>,
    local: &LocalState,
) -> Result<f64> {
    let cl = &problem.dataset.clusters[i];
    let des = &problem.designs[i];
    let (m, v) = predictor_moments(problem, i, global, local);
    let mut loglik = des.log_lik_const;
    for j in 0..cl.len() {
        loglik += match problem.family {
            Family::Poisson => {
                cl.y[j] * m[j] - (cl.log_offset(j) + (m[j] + 0.5 * v[j]).clamp(-ETA_CLAMP, ETA_CLAMP)).exp()
            }
            Family::Bernoulli => cl.y[j] * m[j] - problem.quadrature.b_integral(0, m[j], v[j].max(0.0).sqrt()),
        };
    }
    let resid = &local.mu - &des.w_tilde * &global.mu_beta;
    let q = &resid * resid.transpose() + &local.sigma + &des.w_tilde * &global.sigma_beta * des.w_tilde.transpose();
    let trace = (d_prec * q).trace();
    let logdet = spd_logdet(&local.sigma, "local covariance").map_err(|e| GlmmError::ClusterNumerics {
        cluster: i,
        context: e.to_string(),
    })?;
    let r = problem.dataset.r as f64;
    let total = loglik - 0.5 * trace + 0.5 * logdet + 0.5 * r;
    if !total.is_finite() {
        return Err(GlmmError::NonFinite(format!("lower-bound terms of cluster {i}")));
    }
    Ok(total)
}

/// Evidence lower bound `E_q log p(y, θ) - E_q log q(θ)`.
pub fn lower_bound(problem: &Problem, global: &GlobalState, locals: &[LocalState]) -> Result<f64> {
    let (p, r) = (problem.dataset.p, problem.dataset.r);
    let rf = r as f64;
    let n = problem.n() as f64;
    let d_prec = global.d_precision()?;
    let one = |i: usize| cluster_bound_terms(problem, i, global, &d_prec, &locals[i]);
    let terms: Vec<Result<f64>> = if problem.n() >= PARALLEL_MIN_BATCH {
        (0..problem.n()).into_par_iter().map(one).collect()
    } else {
        (0..problem.n()).map(one).collect()
    };
    let mut clusters = 0.0;
    for t in terms {
        clusters += t?;
    }

    let s_q_logdet = spd_logdet(&global.s_d, "inverse-Wishart scale")?;
    let e_logdet = iw_expected_logdet(global.nu_d, s_q_logdet, r);

    let mu = &global.mu_beta;
    let beta = -0.5 * problem.prior_logdet
        - 0.5 * (mu.dot(&(&problem.prior_precision * mu)) + (&problem.prior_precision * &global.sigma_beta).trace())
        + 0.5 * p as f64
        + 0.5 * spd_logdet(&global.sigma_beta, "covariance of beta")?;

    let (nu, nu_q) = (problem.priors.nu, global.nu_d);
    let ln2 = std::f64::consts::LN_2;
    let prior_norm = 0.5 * nu * spd_logdet(&problem.priors.s, "prior inverse-Wishart scale")?
        - 0.5 * nu * rf * ln2
        - ln_multigamma(r, 0.5 * nu);
    let q_norm = 0.5 * nu_q * s_q_logdet - 0.5 * nu_q * rf * ln2 - ln_multigamma(r, 0.5 * nu_q);
    let d_terms = prior_norm - q_norm + 0.5 * (nu_q - nu - n) * e_logdet - 0.5 * (&problem.priors.s * &d_prec).trace()
        + 0.5 * nu_q * rf;

    let total = clusters + beta + d_terms;
    if !total.is_finite() {
        return Err(GlmmError::NonFinite("lower bound".into()));
    }
    Ok(total)
}

/// Iterates every local to a tight fixed point at the given global state.
pub fn finalize_locals(problem: &Problem, global: &GlobalState, locals: &mut [LocalState]) -> Result<usize> {
    let d_prec = global.d_precision()?;
    let polish = |i: usize| -> Result<(LocalState, usize)> {
        let mut cur = locals[i].clone();
        for rep in 1..=POLISH_MAX_ITER {
            let new = update_local_with(problem, i, global, &d_prec, &cur)?;
            let change = (&new.mu - &cur.mu).norm();
            let sigma_change = (&new.sigma - &cur.sigma).amax();
            let scale = new.mu.norm().max(1.0);
            cur = new;
            if change <= POLISH_TOL * scale && sigma_change <= POLISH_TOL * cur.sigma.amax().max(1.0) {
                return Ok((cur, rep));
            }
        }
        Ok((cur, POLISH_MAX_ITER))
    };
    let polished: Vec<Result<(LocalState, usize)>> = (0..problem.n()).into_par_iter().map(polish).collect();
    let mut total = 0;
    for (i, res) in polished.into_iter().enumerate() {
        let (state, reps) = res?;
        locals[i] = state;
        total += reps;
    }
    Ok(total)
}

/// Running state of a fit, shared by the full-data and stochastic drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProgress {
    pub global: GlobalState,
    pub locals: Vec<LocalState>,
    pub trace: Vec<TraceEntry>,
    pub stochastic_sweeps: usize,
    pub full_cycles: usize,
    pub local_updates: usize,
    pub switched_at: Option<usize>,
    pub lower_bound_decreases: usize,
    pub elapsed_secs: f64,
}

impl FitProgress {
    pub fn new(global: GlobalState, locals: Vec<LocalState>) -> Self {
        FitProgress {
            global,
            locals,
            trace: Vec::new(),
            stochastic_sweeps: 0,
            full_cycles: 0,
            local_updates: 0,
            switched_at: None,
            lower_bound_decreases: 0,
            elapsed_secs: 0.0,
        }
    }

    pub fn last_bound(&self) -> Option<f64> {
        self.trace.last().map(|t| t.lower_bound)
    }

    pub fn sweeps(&self) -> usize {
        self.trace.len()
    }

    /// Records a completed sweep and returns the relative bound increase.
    pub fn record(&mut self, bound: f64, step: f64, phase: Phase, elapsed: f64) -> Option<f64> {
        let rel = self.last_bound().map(|old| (bound - old) / old.abs());
        if let Some(old) = self.last_bound() {
            if bound < old {
                self.lower_bound_decreases += 1;
            }
        }
        self.trace.push(TraceEntry {
            sweep: self.trace.len() + 1,
            lower_bound: bound,
            step_size: step,
            elapsed_secs: elapsed,
            phase,
        });
        rel
    }
}

/// Full-data cycles from `progress` until the relative bound increase falls
/// below `stop_tol` or `max_sweeps` sweeps in total have been run.
pub fn run_full_cycles(
    problem: &Problem,
    config: &FitConfig,
    progress: &mut FitProgress,
    started: Instant,
) -> Result<bool> {
    let all: Vec<usize> = (0..problem.n()).collect();
    let mut step = 1.0;
    while progress.sweeps() < config.max_sweeps {
        optimize_batch(problem, &all, &progress.global, &mut progress.locals, f64::INFINITY, 1)?;
        progress.local_updates += all.len();
        progress.global = stochastic_global_update(problem, &all, step, &progress.global, &progress.locals)?;
        progress.full_cycles += 1;
        let bound = lower_bound(problem, &progress.global, &progress.locals)?;
        let previous = progress.last_bound();
        let rel = progress.record(bound, step, Phase::Full, started.elapsed().as_secs_f64());
        if let (Some(old), true) = (previous, config.damping < 1.0) {
            if bound < old - DAMPING_TRIGGER && step == 1.0 {
                warn!("lower bound fell by {:.3}; damping global steps to {}", old - bound, config.damping);
                step = config.damping;
                continue;
            }
        }
        if let Some(rel) = rel {
            if rel < config.stop_tol {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Turns a finished run into a [`FitResult`], polishing every local first.
pub fn finish(problem: &Problem, mut progress: FitProgress, converged: bool, started: Instant) -> Result<FitResult> {
    progress.local_updates += finalize_locals(problem, &progress.global, &mut progress.locals)?;
    let bound = lower_bound(problem, &progress.global, &progress.locals)?;
    let elapsed = progress.elapsed_secs + started.elapsed().as_secs_f64();
    Ok(FitResult {
        global: progress.global,
        locals: progress.locals,
        trace: progress.trace,
        lower_bound: bound,
        stochastic_sweeps: progress.stochastic_sweeps,
        full_cycles: progress.full_cycles,
        local_updates: progress.local_updates,
        switched_at: progress.switched_at,
        lower_bound_decreases: progress.lower_bound_decreases,
        converged,
        elapsed_secs: elapsed,
    })
}

/// Full-data nonconjugate message passing from the GLM initialization.
pub fn fit_ncvmp(problem: &Problem, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let started = Instant::now();
    let (global, locals) = problem.initial_state()?;
    let mut progress = FitProgress::new(global, locals);
    let converged = run_full_cycles(problem, config, &mut progress, started)?;
    if !converged {
        warn!("full-data updates did not converge within {} cycles", config.max_sweeps);
    }
    info!(
        "message passing finished after {} cycles, lower bound {:.4}",
        progress.full_cycles,
        progress.last_bound().unwrap_or(f64::NAN)
    );
    finish(problem, progress, converged, started)
}
