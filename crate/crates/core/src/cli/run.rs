//! Fit, diagnose, simulate and trace-export pipelines.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ingest_csv, ModelConfig};
use crate::data_model::{
    validate_dataset, ClusterData, ClusterDesign, ColumnPartition, Dataset, Family, PriorSpec, ETA_CLAMP,
};
use crate::diagnostics::{diagnose_all, ConflictReport, Side};
use crate::error::{GlmmError, Result};
use crate::ncvmp::{fit_ncvmp, FitResult, GlobalState, LocalState, Problem, TraceEntry};
use crate::quadrature::sigmoid;
use crate::stochastic::{load_checkpoint, SviRunner};

/// RNG stream used for simulation, separate from mini-batch sampling.
pub const SIMULATION_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub name: String,
    pub mean: f64,
    /// Square root of the diagonal of the variational covariance; variational
    /// posteriors tend to understate uncertainty.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectSummary {
    pub id: String,
    /// `E(α̃_i)` in the fitted parametrization.
    pub alpha_tilde: Vec<f64>,
    /// `E(u_i) = E(α̃_i) − W̃_i E(β)`, the deviation from the population line.
    pub deviation: Vec<f64>,
}

/// Parametrization artifacts, stored so a fit can be reused without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemArtifacts {
    pub partition: ColumnPartition,
    pub designs: Vec<ClusterDesign>,
    pub priors: PriorSpec,
    pub beta_hat: DVector<f64>,
    pub beta_hat_cov: DMatrix<f64>,
    pub r_hat: DMatrix<f64>,
    pub tuning_d: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub version: String,
    pub config: ModelConfig,
    pub cluster_ids: Vec<String>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub beta: Vec<BetaSummary>,
    /// `S_D / (ν_D − r − 1)`, present when `ν_D > r + 1`.
    pub d_mean: Option<DMatrix<f64>>,
    pub random_effects: Vec<RandomEffectSummary>,
    pub lower_bound: f64,
    pub converged: bool,
    pub switched_at: Option<usize>,
    pub stochastic_sweeps: usize,
    pub full_cycles: usize,
    pub lower_bound_decreases: usize,
    pub elapsed_secs: f64,
    pub trace: Vec<TraceEntry>,
    pub conflicts: Option<ConflictReport>,
    pub global: GlobalState,
    pub locals: Vec<LocalState>,
    pub problem: ProblemArtifacts,
}

impl RunOutput {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| GlmmError::InvalidData(format!("{} is not a fit output: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Rebuilds the fitted problem on `dataset`, which must be the data the
    /// fit was run on.
    pub fn problem(&self, dataset: Dataset) -> Result<Problem> {
        let ids: Vec<&str> = dataset.clusters.iter().map(|c| c.id.as_str()).collect();
        if ids.len() != self.cluster_ids.len() || ids.iter().zip(&self.cluster_ids).any(|(a, b)| a != b) {
            return Err(GlmmError::InvalidData("data clusters do not match the fit output".into()));
        }
        if dataset.fixed_names != self.fixed_names || dataset.random_names != self.random_names {
            return Err(GlmmError::InvalidData("data columns do not match the fit output".into()));
        }
        let a = &self.problem;
        let mut problem = Problem::assemble(
            dataset,
            self.config.family,
            &self.config.fit,
            a.partition.clone(),
            a.designs.clone(),
            a.priors.clone(),
            a.beta_hat.clone(),
            a.beta_hat_cov.clone(),
            a.r_hat.clone(),
        )?;
        problem.tuning_d = a.tuning_d.clone();
        Ok(problem)
    }
}

/// Fits a validated dataset under `config`.
pub fn fit_dataset(dataset: Dataset, config: &ModelConfig, checkpoint: Option<&Path>, resume: Option<&Path>) -> Result<RunOutput> {
    let problem = Problem::new(dataset, config.family, &config.fit)?;
    let fit = if config.stochastic {
        let runner = match resume {
            Some(path) => {
                let fresh = SviRunner::from_config(&problem, &config.fit)?;
                let rule = fresh.rule();
                SviRunner::resume(&problem, &config.fit, rule, load_checkpoint(path)?)?
            }
            None => SviRunner::from_config(&problem, &config.fit)?,
        };
        runner.run(checkpoint)?
    } else {
        if resume.is_some() || checkpoint.is_some() {
            warn!("checkpoints apply to stochastic runs only; ignoring");
        }
        fit_ncvmp(&problem, &config.fit)?
    };
    info!(
        "lower bound {:.4} after {} sweeps ({} stochastic)",
        fit.lower_bound,
        fit.trace.len(),
        fit.stochastic_sweeps
    );
    let conflicts = match diagnose_all(&problem, &fit.global, &fit.locals, config.side, config.level) {
        Ok(report) => Some(report),
        Err(e) => {
            warn!("conflict diagnostics unavailable: {e}");
            None
        }
    };
    Ok(summarize(&problem, config, fit, conflicts))
}

pub fn run_fit(config: &ModelConfig, data: &Path, checkpoint: Option<&Path>, resume: Option<&Path>) -> Result<RunOutput> {
    let dataset = ingest_csv(data, config)?;
    fit_dataset(dataset, config, checkpoint, resume)
}

fn summarize(problem: &Problem, config: &ModelConfig, fit: FitResult, conflicts: Option<ConflictReport>) -> RunOutput {
    let ds = &problem.dataset;
    let beta = ds
        .fixed_names
        .iter()
        .enumerate()
        .map(|(j, name)| BetaSummary {
            name: name.clone(),
            mean: fit.global.mu_beta[j],
            sd: fit.global.sigma_beta[(j, j)].sqrt(),
        })
        .collect();
    let random_effects = ds
        .clusters
        .iter()
        .zip(&fit.locals)
        .zip(&problem.designs)
        .map(|((c, l), d)| RandomEffectSummary {
            id: c.id.clone(),
            alpha_tilde: l.mu.iter().copied().collect(),
            deviation: (&l.mu - &d.w_tilde * &fit.global.mu_beta).iter().copied().collect(),
        })
        .collect();
    RunOutput {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        cluster_ids: ds.clusters.iter().map(|c| c.id.clone()).collect(),
        fixed_names: ds.fixed_names.clone(),
        random_names: ds.random_names.clone(),
        beta,
        d_mean: fit.global.d_mean(),
        random_effects,
        lower_bound: fit.lower_bound,
        converged: fit.converged,
        switched_at: fit.switched_at,
        stochastic_sweeps: fit.stochastic_sweeps,
        full_cycles: fit.full_cycles,
        lower_bound_decreases: fit.lower_bound_decreases,
        elapsed_secs: fit.elapsed_secs,
        trace: fit.trace,
        conflicts,
        global: fit.global,
        locals: fit.locals,
        problem: ProblemArtifacts {
            partition: problem.partition.clone(),
            designs: problem.designs.clone(),
            priors: problem.priors.clone(),
            beta_hat: problem.beta_hat.clone(),
            beta_hat_cov: problem.beta_hat_cov.clone(),
            r_hat: problem.r_hat.clone(),
            tuning_d: problem.tuning_d.clone(),
        },
    }
}

/// Conflict report for a stored fit. Refuses states whose locals are stale.
pub fn diagnose_output(output: &RunOutput, dataset: Dataset, side: Side, level: f64) -> Result<ConflictReport> {
    let problem = output.problem(dataset)?;
    diagnose_all(&problem, &output.global, &output.locals, side, level)
}

/// Writes `<out>` as JSON and `<out>` with a `.csv` extension as a table
/// sorted by ascending p-value.
pub fn run_diagnose(output: &RunOutput, data: &Path, side: Side, level: f64, out: &Path) -> Result<ConflictReport> {
    let dataset = ingest_csv(data, &output.config)?;
    let report = diagnose_output(output, dataset, side, level)?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    let csv_path = out.with_extension("csv");
    write_report_csv(&report, std::fs::File::create(csv_path)?)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_report_csv<W: Write>(report: &ConflictReport, writer: W) -> Result<()> {
    let mut rows: Vec<_> = report.clusters.iter().collect();
    rows.sort_by(|a, b| {
        let key = |p: Option<f64>| p.unwrap_or(f64::INFINITY);
        key(a.p_value).total_cmp(&key(b.p_value)).then(a.index.cmp(&b.index))
    });
    let mut out = csv::Writer::from_writer(writer);
    out.write_record([
        "cluster", "delta", "p_lower", "p_upper", "p_two_sided", "p_chi_square", "p_value", "divergent", "note",
    ])?;
    for c in rows {
        out.write_record([
            c.id.clone(),
            fmt_opt(c.delta),
            fmt_opt(c.scalar.map(|s| s.lower)),
            fmt_opt(c.scalar.map(|s| s.upper)),
            fmt_opt(c.scalar.map(|s| s.two_sided)),
            fmt_opt(c.chi_square_p),
            fmt_opt(c.p_value),
            c.divergent.to_string(),
            c.note.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Replicates every cluster design `m` times and draws responses from the
/// fitted model with `β = E(β)` and `u_i ~ N(0, E(D))`. Replicate `k` of
/// cluster `id` is named `id#k`.
pub fn simulate_from_fit(output: &RunOutput, dataset: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    if m == 0 {
        return Err(GlmmError::InvalidConfig("replication count must be positive".into()));
    }
    let d = output.global.d_mean().ok_or_else(|| {
        GlmmError::InvalidData("posterior mean of D is undefined (ν_D ≤ r + 1); cannot simulate".into())
    })?;
    let chol = crate::linalg::cholesky(&d, "posterior mean of D")?;
    let l = chol.l();
    let beta = &output.global.mu_beta;
    let family = output.config.family;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SIMULATION_STREAM);
    let mut clusters = Vec::with_capacity(dataset.n() * m);
    for k in 1..=m {
        for c in &dataset.clusters {
            let z: DVector<f64> = DVector::from_fn(dataset.r, |_, _| StandardNormal.sample(&mut rng));
            let u = &l * z;
            let eta = &c.x * beta + &c.z * u;
            let y = DVector::from_fn(c.len(), |j, _| {
                let e = eta[j].clamp(-ETA_CLAMP, ETA_CLAMP);
                match family {
                    Family::Bernoulli => f64::from(u8::from(rng.random::<f64>() < sigmoid(e))),
                    Family::Poisson => {
                        let rate = (c.log_offset(j) + e).exp();
                        Poisson::new(rate).map_or(0.0, |p| p.sample(&mut rng))
                    }
                }
            });
            clusters.push(ClusterData {
                id: format!("{}#{k}", c.id),
                y,
                x: c.x.clone(),
                z: c.z.clone(),
                offset: c.offset.clone(),
            });
        }
    }
    let ds = Dataset::new(clusters, dataset.fixed_names.clone(), dataset.random_names.clone())?;
    validate_dataset(ds, family)
}

/// One row per sweep: index, lower bound, step size, wall time and whether
/// the sweep was stochastic (1) or full-data (0).
pub fn export_trace<W: Write>(output: &RunOutput, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["sweep", "lower_bound", "step_size", "elapsed_secs", "stochastic"])?;
    for t in &output.trace {
        out.write_record([
            t.sweep.to_string(),
            t.lower_bound.to_string(),
            t.step_size.to_string(),
            t.elapsed_secs.to_string(),
            u8::from(t.phase == crate::ncvmp::Phase::Stochastic).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
