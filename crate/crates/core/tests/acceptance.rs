//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Failing criteria are reported but do not fail the process unless
//! `SVI_GLMM_ACCEPTANCE_STRICT=1` is set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use svi_glmm::cli::{ingest_csv, simulate_from_fit, ModelConfig};
use svi_glmm::cli::run::fit_dataset;
use svi_glmm::data_model::{validate_dataset, ClusterData, Dataset, Family, ParametrizationKind};
use svi_glmm::diagnostics::{diagnose_all, message_pair, zscore_discrepancy, Side};
use svi_glmm::linalg::spd_inverse;
use svi_glmm::ncvmp::{fit_ncvmp, natural_param_estimate, optimize_batch, FitConfig, Problem, TuningSource};
use svi_glmm::quadrature::{b_derivative, Quadrature, DEFAULT_ORDER};
use svi_glmm::stochastic::{fit_svi, StepRule, SviRunner};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

type Check = fn() -> Result<Outcome, String>;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Random-intercept data with one subject-level and one observation-level
/// covariate: `η_ij = β0 + β1 s_i + β2 t_ij + u_i`.
fn random_intercept(family: Family, n: usize, ni: usize, beta: [f64; 3], d: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_dist = Normal::new(0.0, d.sqrt()).unwrap();
    let clusters = (0..n)
        .map(|i| {
            let s = (i % 2) as f64;
            let u = u_dist.sample(&mut rng);
            let x = DMatrix::from_fn(ni, 3, |_, j| match j {
                0 => 1.0,
                1 => s,
                _ => 0.0,
            });
            let mut x = x;
            for j in 0..ni {
                x[(j, 2)] = StandardNormal.sample(&mut rng);
            }
            let y = DVector::from_fn(ni, |j, _| {
                let eta = beta[0] + beta[1] * s + beta[2] * x[(j, 2)] + u;
                match family {
                    Family::Poisson => Poisson::new(eta.exp()).unwrap().sample(&mut rng),
                    Family::Bernoulli => f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))),
                }
            });
            ClusterData {
                id: format!("c{i}"),
                y,
                z: DMatrix::from_element(ni, 1, 1.0),
                x,
                offset: None,
            }
        })
        .collect();
    let names = vec!["(Intercept)".to_string(), "s".to_string(), "t".to_string()];
    let ds = Dataset::new(clusters, names, vec!["(Intercept)".to_string()]).unwrap();
    validate_dataset(ds, family).unwrap()
}

fn c1_reduction() -> Result<Outcome, String> {
    let started = Instant::now();
    let ds = random_intercept(Family::Poisson, 20, 6, [0.5, 0.4, 0.3], 0.5, 101);
    let config = FitConfig {
        batch_size: Some(20),
        local_tol: f64::INFINITY,
        max_local_iter: 1,
        stop_tol: 1e-14,
        max_sweeps: 40,
        deterministic: true,
        ..FitConfig::default()
    };
    let problem = Problem::new(ds, Family::Poisson, &config).map_err(err)?;
    let svi = SviRunner::new(&problem, &config, StepRule::Constant(1.0))
        .map_err(err)?
        .run(None)
        .map_err(err)?;
    let full = fit_ncvmp(&problem, &config).map_err(err)?;
    let bounds = |r: &svi_glmm::ncvmp::FitResult| r.trace.iter().map(|t| t.lower_bound.to_bits()).collect::<Vec<_>>();
    let cycles = full.trace.len();
    let identical = bounds(&svi) == bounds(&full) && svi.global == full.global && svi.locals == full.locals;
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        identical && cycles >= 20 && secs < 5.0,
        format!("{cycles} cycles, trajectories bitwise identical: {identical}, {secs:.2}s"),
    ))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if n < k {
        return Vec::new();
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

fn c2_unbiasedness() -> Result<Outcome, String> {
    let started = Instant::now();
    let ds = random_intercept(Family::Bernoulli, 5, 8, [-0.3, 0.8, 0.6], 1.0, 7);
    let problem = Problem::new(ds, Family::Bernoulli, &FitConfig::default()).map_err(err)?;
    let (global, mut locals) = problem.initial_state().map_err(err)?;
    let all: Vec<usize> = (0..5).collect();
    optimize_batch(&problem, &all, &global, &mut locals, 0.05, 50).map_err(err)?;
    let full = natural_param_estimate(&problem, &all, &global, &locals).map_err(err)?;
    let full_linear = full.linear(&global.mu_beta);
    let mut worst = 0.0f64;
    for k in 1..=3 {
        let batches = combinations(5, k);
        let count = batches.len() as f64;
        let mut precision = DMatrix::zeros(full.precision.nrows(), full.precision.ncols());
        let mut linear = DVector::zeros(full_linear.len());
        let mut scale = DMatrix::zeros(full.scale.nrows(), full.scale.ncols());
        for b in &batches {
            let e = natural_param_estimate(&problem, b, &global, &locals).map_err(err)?;
            linear += e.linear(&global.mu_beta);
            precision += e.precision;
            scale += e.scale;
        }
        worst = worst
            .max((precision / count - &full.precision).amax())
            .max((linear / count - &full_linear).amax())
            .max((scale / count - &full.scale).amax());
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 1e-10 && secs < 10.0,
        format!("max componentwise deviation {worst:.2e} over |B| in 1..=3, {secs:.2}s"),
    ))
}

fn c3_quadrature() -> Result<Outcome, String> {
    let started = Instant::now();
    let q = Quadrature::new(DEFAULT_ORDER).map_err(err)?;
    let mus = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    let sigmas = [0.1, 1.0, 3.0];
    let grid: Vec<(usize, f64, f64)> = mus
        .iter()
        .flat_map(|&m| sigmas.iter().map(move |&s| (m, s)))
        .enumerate()
        .map(|(k, (m, s))| (k, m, s))
        .collect();
    const DRAWS: usize = 10_000_000;
    // Per grid point: the largest |quadrature − MC| / SE over r = 0, 1, 2.
    let z_scores: Vec<f64> = grid
        .par_iter()
        .map(|&(k, mu, sigma)| {
            let mut rng = ChaCha8Rng::seed_from_u64(2024);
            rng.set_stream(k as u64);
            let mut sum = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            for _ in 0..DRAWS {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = mu + sigma * z;
                for r in 0..3 {
                    let v = b_derivative(r, x);
                    sum[r] += v;
                    sq[r] += v * v;
                }
            }
            (0..3)
                .map(|r| {
                    let n = DRAWS as f64;
                    let mean = sum[r] / n;
                    let var = (sq[r] / n - mean * mean).max(0.0) * n / (n - 1.0);
                    (q.b_integral(r, mu, sigma) - mean).abs() / (var / n).sqrt()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let worst_z = z_scores.iter().copied().fold(0.0, f64::max);
    let h = 1e-5;
    let mut worst_fd = 0.0f64;
    for &mu in &mus {
        for &sigma in &sigmas {
            for r in 0..2 {
                let fd = (q.b_integral(r, mu + h, sigma) - q.b_integral(r, mu - h, sigma)) / (2.0 * h);
                let exact = q.b_integral(r + 1, mu, sigma);
                worst_fd = worst_fd.max(((fd - exact) / exact).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        worst_z < 3.0 && worst_fd < 1e-5 && secs < 60.0,
        format!("max |quad − MC| = {worst_z:.2} SE (1e7 draws, 63 values); max FD chain rel. error {worst_fd:.1e}; {secs:.1}s"),
    ))
}

fn epilepsy_config(model_two: bool, kind: ParametrizationKind, tuning: TuningSource) -> ModelConfig {
    let mut c = ModelConfig::new("seizures", "patient", Family::Poisson);
    c.fixed = ["base", "trt", "base_trt", "age", "visit"].iter().map(|s| s.to_string()).collect();
    if model_two {
        c.random = vec!["visit".into()];
    }
    c.fit.parametrization = kind;
    c.fit.tuning = tuning;
    c
}

fn epilepsy_problem(model_two: bool, kind: ParametrizationKind, tuning: TuningSource) -> Result<(Problem, FitConfig), String> {
    let config = epilepsy_config(model_two, kind, tuning);
    let ds = ingest_csv(&data_dir().join("epilepsy.csv"), &config).map_err(err)?;
    let problem = Problem::new(ds, Family::Poisson, &config.fit).map_err(err)?;
    Ok((problem, config.fit))
}

fn message_gap(problem: &Problem, fit: &svi_glmm::ncvmp::FitResult) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, local) in fit.locals.iter().enumerate() {
        let pair = message_pair(problem, i, &fit.global, local);
        let rep = spd_inverse(&pair.sigma_rep, "prior message").map_err(err)?;
        let q = spd_inverse(&local.sigma, "local covariance").map_err(err)?;
        worst = worst
            .max((&rep + &pair.lik_precision - &q).amax())
            .max((&rep * &pair.mu_rep + &pair.lik_natural - &q * &local.mu).amax());
    }
    Ok(worst)
}

const KINDS: [ParametrizationKind; 3] =
    [ParametrizationKind::Noncentered, ParametrizationKind::Centered, ParametrizationKind::Partial];

fn c4_messages() -> Result<Outcome, String> {
    let mut worst = 0.0f64;
    let mut fits = 0;
    for model_two in [false, true] {
        for kind in KINDS {
            let (problem, config) = epilepsy_problem(model_two, kind, TuningSource::PriorGuess)?;
            let fit = fit_ncvmp(&problem, &config).map_err(err)?;
            worst = worst.max(message_gap(&problem, &fit)?);
            fits += 1;
        }
    }
    for kind in KINDS {
        let ds = random_intercept(Family::Bernoulli, 200, 7, [-1.0, 0.7, 0.5], 1.5, 55);
        let config = FitConfig {
            parametrization: kind,
            ..FitConfig::default()
        };
        let problem = Problem::new(ds.clone(), Family::Bernoulli, &config).map_err(err)?;
        let fit = fit_ncvmp(&problem, &config).map_err(err)?;
        worst = worst.max(message_gap(&problem, &fit)?);
        let stochastic = FitConfig {
            batch_size: Some(20),
            step_big_a: 4.0,
            ..config
        };
        let fit = fit_svi(&problem, &stochastic).map_err(err)?;
        worst = worst.max(message_gap(&problem, &fit)?);
        fits += 2;
    }
    Ok(verdict(
        worst <= 1e-8,
        format!("{fits} converged fits, max natural-parameter gap {worst:.2e}"),
    ))
}

fn c5_epilepsy_bounds() -> Result<Outcome, String> {
    let targets = [[-707.0, -701.5, -701.1], [-701.4, -696.1, -695.3]];
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, model_two) in [false, true].into_iter().enumerate() {
        let mut bounds = [0.0; 3];
        for (k, kind) in KINDS.into_iter().enumerate() {
            let (problem, config) = epilepsy_problem(model_two, kind, TuningSource::Pilot)?;
            let started = Instant::now();
            let fit = fit_ncvmp(&problem, &config).map_err(err)?;
            let secs = started.elapsed().as_secs_f64();
            bounds[k] = fit.lower_bound;
            ok &= fit.converged && (fit.lower_bound - targets[m][k]).abs() <= 1.0 && secs < 60.0;
        }
        let partial_best = bounds[2] > bounds[0] && bounds[2] > bounds[1];
        ok &= partial_best;
        let (problem, config) = epilepsy_problem(model_two, ParametrizationKind::Partial, TuningSource::PriorGuess)?;
        let guess = fit_ncvmp(&problem, &config).map_err(err)?.lower_bound;
        parts.push(format!(
            "model {}: NC {:.2} / C {:.2} / PNC {:.2} (targets {} / {} / {}; PNC with prior-guess tuning {guess:.2})",
            if model_two { "II" } else { "I" },
            bounds[0],
            bounds[1],
            bounds[2],
            targets[m][0],
            targets[m][1],
            targets[m][2],
        ));
    }
    Ok(verdict(ok, parts.join("; ")))
}

fn epilepsy_two_sided(model_two: bool, tuning: TuningSource) -> Result<Vec<(String, f64)>, String> {
    let (problem, config) = epilepsy_problem(model_two, ParametrizationKind::Partial, tuning)?;
    let fit = fit_ncvmp(&problem, &config).map_err(err)?;
    let report = diagnose_all(&problem, &fit.global, &fit.locals, Side::TwoSided, 0.05).map_err(err)?;
    let mut ps: Vec<(String, f64)> = report
        .clusters
        .iter()
        .filter_map(|c| c.p_value.map(|p| (c.id.clone(), p)))
        .collect();
    ps.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(ps)
}

fn c6_epilepsy_outliers() -> Result<Outcome, String> {
    let expected = [("10", 0.005), ("25", 0.049), ("56", 0.051)];
    let ps = epilepsy_two_sided(true, TuningSource::Pilot)?;
    let lookup = |id: &str| ps.iter().find(|(c, _)| c == id).map(|(_, p)| *p).unwrap_or(f64::NAN);
    let values_ok = expected.iter().all(|(id, p)| (lookup(id) - p).abs() <= 0.03);
    let mut top: Vec<&str> = ps.iter().take(3).map(|(c, _)| c.as_str()).collect();
    top.sort_unstable();
    let ranks_ok = top == ["10", "25", "56"];
    let smallest: Vec<String> = ps.iter().take(5).map(|(c, p)| format!("{c}:{p:.3}")).collect();
    let model_one: Vec<String> = epilepsy_two_sided(false, TuningSource::Pilot)?
        .iter()
        .take(5)
        .map(|(c, p)| format!("{c}:{p:.3}"))
        .collect();
    Ok(verdict(
        values_ok && ranks_ok,
        format!(
            "model II p(10, 25, 56) = {:.3}, {:.3}, {:.3} (within 0.03: {values_ok}); three smallest are 10/25/56: {ranks_ok}; \
             smallest five [{}]; model I smallest five [{}]",
            lookup("10"),
            lookup("25"),
            lookup("56"),
            smallest.join(" "),
            model_one.join(" ")
        ),
    ))
}

/// Hospital-level death counts expanded to one Bernoulli row per operation.
fn bristol_dataset(path: &Path) -> Result<Dataset, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    let mut clusters = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(err)?;
        let deaths: usize = rec[1].trim().parse().map_err(err)?;
        let ops: usize = rec[2].trim().parse().map_err(err)?;
        clusters.push(ClusterData {
            id: rec[0].trim().to_string(),
            y: DVector::from_fn(ops, |j, _| f64::from(u8::from(j < deaths))),
            x: DMatrix::from_element(ops, 1, 1.0),
            z: DMatrix::from_element(ops, 1, 1.0),
            offset: None,
        });
    }
    let names = vec!["(Intercept)".to_string()];
    let ds = Dataset::new(clusters, names.clone(), names).map_err(err)?;
    validate_dataset(ds, Family::Bernoulli).map_err(err)
}

fn c7_bristol() -> Result<Outcome, String> {
    let path = std::env::var_os("SVI_GLMM_BRISTOL_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| data_dir().join("bristol_counts.csv"));
    if !path.exists() {
        return Ok(Outcome {
            status: Status::Skip,
            detail: format!("no hospital counts at {}", path.display()),
        });
    }
    let ds = bristol_dataset(&path)?;
    let cross_validatory = [0.001, 0.436, 0.935, 0.125, 0.298, 0.720, 0.737, 0.661, 0.440, 0.380, 0.763, 0.721];
    let run = |tuning: TuningSource| -> Result<(f64, f64, f64), String> {
        let config = FitConfig {
            parametrization: ParametrizationKind::Partial,
            tuning,
            ..FitConfig::default()
        };
        let problem = Problem::new(ds.clone(), Family::Bernoulli, &config).map_err(err)?;
        let fit = fit_ncvmp(&problem, &config).map_err(err)?;
        let report = diagnose_all(&problem, &fit.global, &fit.locals, Side::Upper, 0.05).map_err(err)?;
        let upper: Vec<f64> = report.clusters.iter().map(|c| c.scalar.map_or(f64::NAN, |s| s.upper)).collect();
        let z = zscore_discrepancy(&cross_validatory, &upper).map_err(err)?;
        Ok((fit.lower_bound, upper[0], z))
    };
    let (bound, p1, z) = run(TuningSource::Pilot)?;
    let (gb, gp, gz) = run(TuningSource::PriorGuess)?;
    let ok = (bound + 1212.9).abs() <= 0.5 && (p1 - 0.005).abs() <= 0.01 && (z - 0.083).abs() <= 0.02;
    Ok(verdict(
        ok,
        format!(
            "PNC bound {bound:.2} (target -1212.9), hospital 1 upper p {p1:.4} (target 0.005), z-score discrepancy {z:.3} \
             (target 0.083); prior-guess tuning: {gb:.2}, {gp:.4}, {gz:.3}"
        ),
    ))
}

/// Time at which a trace first comes within `tol` of `target`.
fn time_to_reach(fit: &svi_glmm::ncvmp::FitResult, target: f64, tol: f64) -> Option<f64> {
    fit.trace.iter().find(|t| t.lower_bound >= target - tol).map(|t| t.elapsed_secs)
}

fn c8_speedup() -> Result<Outcome, String> {
    let started = Instant::now();
    let base = random_intercept(Family::Bernoulli, 500, 7, [-1.5, 0.6, 0.8], 2.0, 2013);
    let mut model = ModelConfig::new("y", "id", Family::Bernoulli);
    model.fixed = vec!["s".into(), "t".into()];
    let output = fit_dataset(base.clone(), &model, None, None).map_err(err)?;
    let big = simulate_from_fit(&output, &base, 20, 99).map_err(err)?;
    let n = big.n();

    let config = FitConfig::default();
    let problem = Problem::new(big, Family::Bernoulli, &config).map_err(err)?;
    let t0 = Instant::now();
    let full = fit_ncvmp(&problem, &config).map_err(err)?;
    let t_full = t0.elapsed().as_secs_f64();

    let svi_config = FitConfig {
        batch_size: Some(100),
        step_big_a: 16.0,
        step_alpha: 1.0,
        seed: 5,
        ..config
    };
    let t0 = Instant::now();
    let svi = fit_svi(&problem, &svi_config).map_err(err)?;
    let t_svi = t0.elapsed().as_secs_f64();

    let reach_full = time_to_reach(&full, full.lower_bound, 1.0).unwrap_or(t_full);
    let reach_svi = time_to_reach(&svi, full.lower_bound, 1.0);
    let ratio = reach_svi.map_or(f64::INFINITY, |t| t / reach_full);
    let close = (svi.lower_bound - full.lower_bound).abs() <= 1.0;
    Ok(verdict(
        close && ratio <= 1.0 / 1.5,
        format!(
            "n = {n}: full-data {:.1}s to within 1.0 ({t_full:.1}s total, bound {:.2}); stochastic {} ({t_svi:.1}s total, \
             switched after sweep {:?}, bound {:.2}); time ratio {ratio:.2} (bar 0.67); {:.0}s",
            reach_full,
            full.lower_bound,
            reach_svi.map_or("never".to_string(), |t| format!("{t:.1}s")),
            svi.switched_at,
            svi.lower_bound,
            started.elapsed().as_secs_f64()
        ),
    ))
}

fn c9_calibration() -> Result<Outcome, String> {
    let base = random_intercept(Family::Poisson, 50, 6, [0.3, 0.5, 0.4], 0.6, 77);
    let mut model = ModelConfig::new("y", "id", Family::Poisson);
    model.fixed = vec!["s".into(), "t".into()];
    let output = fit_dataset(base.clone(), &model, None, None).map_err(err)?;
    let sim = simulate_from_fit(&output, &base, 20, 31).map_err(err)?;
    let n = sim.n();
    let refit = fit_dataset(sim, &model, None, None).map_err(err)?;
    let report = refit.conflicts.ok_or("diagnostics unavailable")?;
    let flagged = report.flagged().len() as f64 / n as f64;
    let sd = (0.05 * 0.95 / n as f64).sqrt();
    Ok(verdict(
        (flagged - 0.05).abs() <= 2.0 * sd,
        format!("{n} clusters, flagged fraction {flagged:.4} (accept 0.05 ± {:.4})", 2.0 * sd),
    ))
}

fn c10_tiny_model() -> Result<Outcome, String> {
    let started = Instant::now();
    let y = [3.0, 5.0];
    let cluster = ClusterData {
        id: "only".into(),
        y: DVector::from_row_slice(&y),
        x: DMatrix::from_element(2, 1, 1.0),
        z: DMatrix::from_element(2, 1, 1.0),
        offset: None,
    };
    let names = vec!["(Intercept)".to_string()];
    let ds = validate_dataset(Dataset::new(vec![cluster], names.clone(), names).map_err(err)?, Family::Poisson)
        .map_err(err)?;
    let config = FitConfig {
        stop_tol: 1e-10,
        ..FitConfig::default()
    };
    let problem = Problem::new(ds, Family::Poisson, &config).map_err(err)?;
    let fit = fit_ncvmp(&problem, &config).map_err(err)?;

    // η = β + u with β ~ N(0, σ²_β), u | D ~ N(0, D), D ~ IG(ν/2, S/2):
    // log p(y) = log ∫ p(D) ∫ N(η; 0, σ²_β + D) Π Poisson(y_j; e^η) dη dD.
    let var_beta = problem.priors.sigma_beta[(0, 0)];
    let (nu, s) = (problem.priors.nu, problem.priors.s[(0, 0)]);
    let (shape, scale) = (nu / 2.0, s / 2.0);
    let ln_lik = |eta: f64| y.iter().map(|&v| v * eta - eta.exp() - ln_gamma(v + 1.0)).sum::<f64>();
    let (eta_lo, eta_hi, eta_n) = (-15.0, 8.0, 23_001usize);
    let deta = (eta_hi - eta_lo) / (eta_n - 1) as f64;
    let etas: Vec<f64> = (0..eta_n).map(|k| eta_lo + k as f64 * deta).collect();
    let lik: Vec<f64> = etas.iter().map(|&e| ln_lik(e)).collect();
    let (t_lo, t_hi, t_n) = (-40.0, 40.0, 16_001usize);
    let dt = (t_hi - t_lo) / (t_n - 1) as f64;
    let log_terms: Vec<f64> = (0..t_n)
        .into_par_iter()
        .map(|k| {
            let t = t_lo + k as f64 * dt;
            let d = t.exp();
            // log of p(D) dD/dt for D = e^t.
            let log_prior = shape * scale.ln() - ln_gamma(shape) - shape * t - scale / d;
            let v = var_beta + d;
            let inner: Vec<f64> = etas
                .iter()
                .zip(&lik)
                .map(|(&e, &l)| l - 0.5 * (2.0 * std::f64::consts::PI * v).ln() - e * e / (2.0 * v))
                .collect();
            let m = inner.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = inner
                .iter()
                .enumerate()
                .map(|(i, &x)| if i == 0 || i == eta_n - 1 { 0.5 } else { 1.0 } * (x - m).exp())
                .sum();
            let w = if k == 0 || k == t_n - 1 { 0.5 } else { 1.0 };
            log_prior + m + (s * deta * w).ln()
        })
        .collect();
    let m = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_evidence = m + (log_terms.iter().map(|x| (x - m).exp()).sum::<f64>() * dt).ln();
    let gap = log_evidence - fit.lower_bound;
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        gap >= 0.0 && gap < 1.0 && secs < 60.0,
        format!("bound {:.4}, log p(y) {log_evidence:.4}, gap {gap:.4} nats, {secs:.1}s", fit.lower_bound),
    ))
}

fn main() {
    let criteria: [(&str, &str, Check); 10] = [
        ("C1", "reduction equivalence", c1_reduction),
        ("C2", "unbiasedness oracle", c2_unbiasedness),
        ("C3", "quadrature oracle", c3_quadrature),
        ("C4", "message consistency", c4_messages),
        ("C5", "epilepsy lower bounds", c5_epilepsy_bounds),
        ("C6", "epilepsy divergent units", c6_epilepsy_outliers),
        ("C7", "Bristol benchmark", c7_bristol),
        ("C8", "stochastic speedup", c8_speedup),
        ("C9", "calibration", c9_calibration),
        ("C10", "tiny-model bound dominance", c10_tiny_model),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (id, name, check) in criteria {
        if filter.as_deref().is_some_and(|f| f != id) {
            continue;
        }
        let outcome = check().unwrap_or_else(|e| Outcome {
            status: Status::Fail,
            detail: format!("error: {e}"),
        });
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failures += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("[{tag}] {id} {name}: {}", outcome.detail);
    }
    println!("acceptance: {failures} failing criteria");
    if failures > 0 && std::env::var("SVI_GLMM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
