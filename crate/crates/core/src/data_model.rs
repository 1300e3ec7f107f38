//! Model definition: clustered data, priors, the partially noncentered
//! parametrization and the pooled-GLM quantities used for initialization.
//!
//! Fixed effects are always indexed in the order of the columns of `X_i`.
//! The matrix `C_i` is therefore stored embedded in `r × p` form, with zero
//! columns for general covariates, so that `C_i β` picks out `β_c` directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{GlmmError, Result};
use crate::linalg::{cholesky, spd_inverse, symmetrize, weighted_crossprod};
use crate::quadrature::{b0, b2, sigmoid};

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bernoulli,
    Poisson,
}

impl Family {
    /// Mean response for linear predictor `eta` (without offset) and log-offset.
    pub fn mean(self, eta: f64, log_offset: f64) -> f64 {
        let e = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
        match self {
            Family::Bernoulli => sigmoid(e),
            Family::Poisson => (log_offset + e).exp(),
        }
    }

    /// `log p(y | eta)` including normalizing constants.
    pub fn log_density(self, y: f64, eta: f64, log_offset: f64) -> f64 {
        match self {
            Family::Bernoulli => y * eta - b0(eta),
            Family::Poisson => {
                let e = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
                y * (log_offset + eta) - (log_offset + e).exp() - ln_gamma(y + 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Poisson exposures; `None` means all ones.
    pub offset: Option<DVector<f64>>,
}

impl ClusterData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn log_offset(&self, j: usize) -> f64 {
        self.offset.as_ref().map_or(0.0, |e| e[j].ln())
    }

    pub fn log_offsets(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |j, _| self.log_offset(j))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub clusters: Vec<ClusterData>,
    pub p: usize,
    pub r: usize,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// For each column of `Z_i`, the matching column of `X_i`. Filled by
    /// [`validate_dataset`].
    pub z_columns: Vec<usize>,
}

impl Dataset {
    pub fn new(
        clusters: Vec<ClusterData>,
        fixed_names: Vec<String>,
        random_names: Vec<String>,
    ) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| GlmmError::InvalidData("dataset has no clusters".into()))?;
        let (p, r) = (first.x.ncols(), first.z.ncols());
        for c in &clusters {
            if c.x.ncols() != p || c.z.ncols() != r {
                return Err(GlmmError::InvalidData(format!(
                    "cluster {} has {}x{} fixed and {} random columns, expected {p} and {r}",
                    c.id,
                    c.x.nrows(),
                    c.x.ncols(),
                    c.z.ncols()
                )));
            }
        }
        if fixed_names.len() != p || random_names.len() != r {
            return Err(GlmmError::InvalidData("column names do not match design dimensions".into()));
        }
        Ok(Dataset {
            clusters,
            p,
            r,
            fixed_names,
            random_names,
            z_columns: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    pub fn total_observations(&self) -> usize {
        self.clusters.iter().map(ClusterData::len).sum()
    }
}

/// Checks the structural assumptions of the model and resolves which column
/// of `X_i` each column of `Z_i` duplicates.
pub fn validate_dataset(mut raw: Dataset, family: Family) -> Result<Dataset> {
    if raw.clusters.is_empty() {
        return Err(GlmmError::InvalidData("dataset has no clusters".into()));
    }
    if raw.r == 0 {
        return Err(GlmmError::InvalidData("at least one random-effect column is required".into()));
    }
    for c in &raw.clusters {
        let ni = c.len();
        if ni == 0 {
            return Err(GlmmError::InvalidData(format!("cluster {} is empty", c.id)));
        }
        if c.x.nrows() != ni || c.z.nrows() != ni {
            return Err(GlmmError::InvalidData(format!(
                "cluster {}: design rows do not match response length {ni}",
                c.id
            )));
        }
        if c.x.iter().chain(c.z.iter()).any(|v| !v.is_finite()) {
            return Err(GlmmError::InvalidData(format!("cluster {}: non-finite design entry", c.id)));
        }
        if c.z.column(0).iter().any(|&v| v != 1.0) {
            return Err(GlmmError::InvalidData(format!(
                "cluster {}: first random-effects column must be all ones",
                c.id
            )));
        }
        for &y in c.y.iter() {
            let ok = match family {
                Family::Bernoulli => y == 0.0 || y == 1.0,
                Family::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            };
            if !ok {
                return Err(GlmmError::InvalidData(format!(
                    "cluster {}: response {y} is not valid for the {family:?} family",
                    c.id
                )));
            }
        }
        match (&c.offset, family) {
            (Some(_), Family::Bernoulli) => {
                return Err(GlmmError::InvalidData(format!(
                    "cluster {}: offsets are only allowed for Poisson responses",
                    c.id
                )))
            }
            (Some(e), Family::Poisson) => {
                if e.len() != ni {
                    return Err(GlmmError::InvalidData(format!("cluster {}: offset length mismatch", c.id)));
                }
                if e.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                    return Err(GlmmError::InvalidData(format!(
                        "cluster {}: offsets must be strictly positive",
                        c.id
                    )));
                }
            }
            _ => {}
        }
    }

    let mut z_columns = Vec::with_capacity(raw.r);
    for k in 0..raw.r {
        let found = (0..raw.p).find(|&j| {
            !z_columns.contains(&j) && raw.clusters.iter().all(|c| c.z.column(k) == c.x.column(j))
        });
        match found {
            Some(j) => z_columns.push(j),
            None => {
                return Err(GlmmError::InvalidData(format!(
                    "random-effects column {k} ({}) does not match any fixed-effects column",
                    raw.random_names.get(k).map_or("?", String::as_str)
                )))
            }
        }
    }
    raw.z_columns = z_columns;
    Ok(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma_beta: DMatrix<f64>,
    pub nu: f64,
    pub s: DMatrix<f64>,
    pub c: f64,
}

impl PriorSpec {
    /// `β ~ N(0, 1000 I)`, `D ~ IW(r, r R̂)`.
    pub fn default_for(p: usize, r_hat: &DMatrix<f64>, c: f64) -> Self {
        let r = r_hat.nrows();
        PriorSpec {
            sigma_beta: DMatrix::identity(p, p) * 1000.0,
            nu: r as f64,
            s: r_hat * r as f64,
            c,
        }
    }

    pub fn validate(&self, p: usize, r: usize) -> Result<()> {
        if self.sigma_beta.shape() != (p, p) || self.s.shape() != (r, r) {
            return Err(GlmmError::InvalidConfig("prior dimensions do not match the model".into()));
        }
        cholesky(&self.sigma_beta, "prior covariance of beta")?;
        cholesky(&self.s, "prior inverse-Wishart scale")?;
        if !(self.nu >= r as f64) {
            return Err(GlmmError::InvalidConfig(format!(
                "inverse-Wishart degrees of freedom {} must be at least r = {r}",
                self.nu
            )));
        }
        if !(self.c > 0.0) {
            return Err(GlmmError::InvalidConfig("prior inflation factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ParametrizationKind {
    Centered,
    Noncentered,
    #[default]
    #[serde(alias = "partially_noncentered")]
    Partial,
}

/// Roles of the columns of `X_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnPartition {
    pub z_columns: Vec<usize>,
    pub subject_specific: Vec<usize>,
    pub general: Vec<usize>,
}

fn constant_within_clusters(dataset: &Dataset, j: usize) -> bool {
    dataset.clusters.iter().all(|c| {
        let col = c.x.column(j);
        col.iter().all(|&v| v == col[0])
    })
}

impl ColumnPartition {
    /// Auto-detects subject-specific columns unless an explicit list is given.
    pub fn resolve(dataset: &Dataset, subject_specific: Option<&[usize]>) -> Result<Self> {
        if dataset.z_columns.len() != dataset.r {
            return Err(GlmmError::InvalidData("dataset has not been validated".into()));
        }
        let z_columns = dataset.z_columns.clone();
        let subject_specific: Vec<usize> = match subject_specific {
            Some(list) => {
                for &j in list {
                    if j >= dataset.p || z_columns.contains(&j) {
                        return Err(GlmmError::InvalidConfig(format!(
                            "column {j} cannot be declared subject specific"
                        )));
                    }
                    if !constant_within_clusters(dataset, j) {
                        return Err(GlmmError::InvalidConfig(format!(
                            "column {} is declared subject specific but varies within a cluster",
                            dataset.fixed_names[j]
                        )));
                    }
                }
                let mut v = list.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (0..dataset.p)
                .filter(|j| !z_columns.contains(j) && constant_within_clusters(dataset, *j))
                .collect(),
        };
        let general = (0..dataset.p)
            .filter(|j| !z_columns.contains(j) && !subject_specific.contains(j))
            .collect();
        Ok(ColumnPartition {
            z_columns,
            subject_specific,
            general,
        })
    }
}

/// Per-cluster parametrization artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDesign {
    /// `r × p`; `C_i β = β_z + e_1 x_si' β_s`.
    pub c: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// `r × p`; `(I - W_i) C_i` with zero general columns.
    pub w_tilde: DMatrix<f64>,
    /// `n_i × p`; `Z_i W_i C_i + X_gi`.
    pub v: DMatrix<f64>,
    /// Terms of `log p(y_i | η_i)` not involving the parameters.
    pub log_lik_const: f64,
}

/// Diagonal GLM weights `μ` (Poisson) or `μ(1 - μ)` (Bernoulli) at `u_i = 0`.
pub fn glm_weights(cluster: &ClusterData, family: Family, beta_hat: &DVector<f64>) -> DVector<f64> {
    let eta = &cluster.x * beta_hat;
    DVector::from_fn(cluster.len(), |j, _| {
        let e = eta[j].clamp(-ETA_CLAMP, ETA_CLAMP);
        match family {
            Family::Bernoulli => b2(e),
            Family::Poisson => (cluster.log_offset(j) + e).exp(),
        }
    })
}

/// Maximum-likelihood fit of the pooled GLM (all `u_i = 0`) by IRLS.
///
/// Returns the estimate and the inverse Fisher information at the estimate.
pub fn fit_pooled_glm(dataset: &Dataset, family: Family) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = dataset.p;
    let mut gram = DMatrix::zeros(p, p);
    for c in &dataset.clusters {
        gram += c.x.transpose() * &c.x;
    }
    if !is_full_rank(&gram) {
        return Err(GlmmError::RankDeficient);
    }

    // Start from the data, as in the usual GLM initialization.
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    for c in &dataset.clusters {
        let mut w = DVector::zeros(c.len());
        let mut z = DVector::zeros(c.len());
        for j in 0..c.len() {
            let y = c.y[j];
            match family {
                Family::Bernoulli => {
                    let mu = (y + 0.5) / 2.0;
                    w[j] = mu * (1.0 - mu);
                    z[j] = (mu / (1.0 - mu)).ln() + (y - mu) / w[j];
                }
                Family::Poisson => {
                    let mu = y + 0.1;
                    w[j] = mu;
                    z[j] = mu.ln() - c.log_offset(j) + (y - mu) / mu;
                }
            }
        }
        xtwx += weighted_crossprod(&c.x, &w);
        xtwz += c.x.transpose() * w.component_mul(&z);
    }
    let mut beta = cholesky(&xtwx, "pooled GLM information")
        .map_err(|_| GlmmError::RankDeficient)?
        .solve(&xtwz);

    for _ in 0..IRLS_MAX_ITER {
        let (info, score) = glm_information_and_score(dataset, family, &beta);
        let chol = cholesky(&info, "pooled GLM information").map_err(|_| GlmmError::RankDeficient)?;
        let step = chol.solve(&score);
        if step.iter().any(|v| !v.is_finite()) {
            return Err(GlmmError::NonFinite("pooled GLM update".into()));
        }
        beta += &step;
        if step.norm() <= IRLS_TOL * beta.norm().max(1.0) {
            let (info, _) = glm_information_and_score(dataset, family, &beta);
            let cov = spd_inverse(&info, "pooled GLM information")?;
            return Ok((beta, cov));
        }
    }
    Err(GlmmError::IrlsNotConverged(IRLS_MAX_ITER))
}

/// Fisher information `X' W X` and score `X' (y - μ)` of the pooled GLM.
pub fn glm_information_and_score(
    dataset: &Dataset,
    family: Family,
    beta: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = dataset.p;
    let mut info = DMatrix::zeros(p, p);
    let mut score = DVector::zeros(p);
    for c in &dataset.clusters {
        let eta = &c.x * beta;
        let mut w = DVector::zeros(c.len());
        let mut resid = DVector::zeros(c.len());
        for j in 0..c.len() {
            let mu = family.mean(eta[j], c.log_offset(j));
            w[j] = match family {
                Family::Bernoulli => mu * (1.0 - mu),
                Family::Poisson => mu,
            };
            resid[j] = c.y[j] - mu;
        }
        info += weighted_crossprod(&c.x, &w);
        score += c.x.transpose() * resid;
    }
    (symmetrize(&info), score)
}

fn is_full_rank(gram: &DMatrix<f64>) -> bool {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-12 * max
}

/// `R̂ = c ((1/n) Σ_i Z_i' M_i Z_i)^{-1}` with `M_i` the pooled-GLM weights.
pub fn kass_prior_guess(
    dataset: &Dataset,
    family: Family,
    beta_hat: &DVector<f64>,
    c: f64,
) -> Result<DMatrix<f64>> {
    let r = dataset.r;
    let mut avg = DMatrix::zeros(r, r);
    for cl in &dataset.clusters {
        avg += weighted_crossprod(&cl.z, &glm_weights(cl, family, beta_hat));
    }
    avg /= dataset.n() as f64;
    let inv = spd_inverse(&avg, "averaged GLM weight matrix (check the rank of the random-effects design)")?;
    Ok(inv * c)
}

/// `W_i = (Z_i' Q_i Z_i + D^{-1})^{-1} D^{-1}`.
pub fn tuning_matrix(
    cluster: &ClusterData,
    family: Family,
    d: &DMatrix<f64>,
    eta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let q = match family {
        Family::Bernoulli => eta.map(|e| b2(e.clamp(-ETA_CLAMP, ETA_CLAMP))),
        Family::Poisson => cluster.y.clone(),
    };
    let d_inv = spd_inverse(d, "random-effects covariance guess")?;
    let a = weighted_crossprod(&cluster.z, &q) + &d_inv;
    Ok(cholesky(&a, "tuning matrix system")?.solve(&d_inv))
}

/// Builds `C_i`, `W_i`, `W̃_i` and `V_i` for every cluster.
pub fn build_parametrization(
    dataset: &Dataset,
    partition: &ColumnPartition,
    kind: ParametrizationKind,
    d_guess: &DMatrix<f64>,
    beta_hat: &DVector<f64>,
    family: Family,
) -> Result<Vec<ClusterDesign>> {
    let (p, r) = (dataset.p, dataset.r);
    for &j in &partition.subject_specific {
        if !constant_within_clusters(dataset, j) {
            return Err(GlmmError::InvalidConfig(format!(
                "column {} is classified as subject specific but varies within a cluster",
                dataset.fixed_names[j]
            )));
        }
    }
    let mut designs = Vec::with_capacity(dataset.n());
    for cl in &dataset.clusters {
        let mut c = DMatrix::zeros(r, p);
        for (k, &j) in partition.z_columns.iter().enumerate() {
            c[(k, j)] = 1.0;
        }
        for &j in &partition.subject_specific {
            c[(0, j)] = cl.x[(0, j)];
        }
        let w = match kind {
            ParametrizationKind::Centered => DMatrix::zeros(r, r),
            ParametrizationKind::Noncentered => DMatrix::identity(r, r),
            ParametrizationKind::Partial => {
                let eta = &cl.x * beta_hat;
                tuning_matrix(cl, family, d_guess, &eta)?
            }
        };
        let w_tilde = (DMatrix::identity(r, r) - &w) * &c;
        let mut v = &cl.z * &w * &c;
        for &j in &partition.general {
            v.set_column(j, &(v.column(j) + cl.x.column(j)));
        }
        let log_lik_const = match family {
            Family::Bernoulli => 0.0,
            Family::Poisson => (0..cl.len())
                .map(|j| cl.y[j] * cl.log_offset(j) - ln_gamma(cl.y[j] + 1.0))
                .sum(),
        };
        designs.push(ClusterDesign {
            c,
            w,
            w_tilde,
            v,
            log_lik_const,
        });
    }
    Ok(designs)
}

/// `log p(y_i | β, α̃_i) + log N(α̃_i; W̃_i β, D)` for one cluster.
pub fn cluster_log_joint(
    cluster: &ClusterData,
    design: &ClusterDesign,
    family: Family,
    beta: &DVector<f64>,
    alpha_tilde: &DVector<f64>,
    d: &DMatrix<f64>,
) -> Result<f64> {
    let eta = &design.v * beta + &cluster.z * alpha_tilde;
    let mut acc = 0.0;
    for j in 0..cluster.len() {
        acc += family.log_density(cluster.y[j], eta[j], cluster.log_offset(j));
    }
    Ok(acc + gaussian_log_density(alpha_tilde, &(&design.w_tilde * beta), d)?)
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(cov, "Gaussian covariance")?;
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let k = x.len() as f64;
    Ok(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() + logdet + diff.dot(&sol)))
}
