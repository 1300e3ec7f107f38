use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use svi_glmm::cli::{self, ingest::export_csv, ModelConfig, Overrides, RunOutput};
use svi_glmm::data_model::ParametrizationKind;
use svi_glmm::diagnostics::Side;
use svi_glmm::{GlmmError, Result};

#[derive(Parser)]
#[command(name = "svi-glmm", version, about = "Variational Bayes for Poisson and logistic GLMMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Centered,
    Noncentered,
    Partial,
}

impl From<Kind> for ParametrizationKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Centered => ParametrizationKind::Centered,
            Kind::Noncentered => ParametrizationKind::Noncentered,
            Kind::Partial => ParametrizationKind::Partial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Lower,
    Upper,
    TwoSided,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Lower => Side::Lower,
            SideArg::Upper => Side::Upper,
            SideArg::TwoSided => Side::TwoSided,
        }
    }
}

#[derive(clap::Args)]
struct FitFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Use stochastic mini-batch updates before switching to full-data cycles.
    #[arg(long)]
    stochastic: bool,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "step-A")]
    step_a: Option<f64>,
    #[arg(long = "step-alpha")]
    step_alpha: Option<f64>,
    #[arg(long, value_enum)]
    parametrization: Option<Kind>,
    #[arg(long = "quadrature-order")]
    quadrature_order: Option<usize>,
    /// Ordered (bitwise reproducible) reductions; pass `false` to allow parallel ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

impl FitFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            stochastic: self.stochastic,
            batch_size: self.batch_size,
            step_big_a: self.step_a,
            step_alpha: self.step_alpha,
            parametrization: self.parametrization.map(Into::into),
            quadrature_order: self.quadrature_order,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write the run output as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write a checkpoint after every stochastic sweep.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume a stochastic run from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        flags: FitFlags,
    },
    /// Conflict p-values from a stored fit; writes JSON to --out and a CSV beside it.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        side: Option<SideArg>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Draw a dataset from a stored fit, replicating each cluster design.
    Simulate {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the per-sweep lower-bound trace of a stored fit as CSV.
    Trace {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SVI_GLMM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| GlmmError::InvalidConfig(format!("SVI_GLMM_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| GlmmError::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

fn execute(command: Command) -> Result<u8> {
    match command {
        Command::Fit {
            data,
            config,
            out,
            checkpoint,
            resume,
            flags,
        } => {
            let mut model = ModelConfig::load(&config)?;
            flags.overrides().apply(&mut model)?;
            let output = cli::run_fit(&model, &data, checkpoint.as_deref(), resume.as_deref())?;
            output.save(&out)?;
            println!(
                "lower bound {:.4}; {} sweeps; converged: {}",
                output.lower_bound,
                output.trace.len(),
                output.converged
            );
            Ok(if output.converged { cli::EXIT_CONVERGED } else { cli::EXIT_NOT_CONVERGED })
        }
        Command::Diagnose {
            fit,
            data,
            out,
            side,
            level,
        } => {
            let output = RunOutput::load(&fit)?;
            let side = side.map_or(output.config.side, Into::into);
            let level = level.unwrap_or(output.config.level);
            let report = cli::run_diagnose(&output, &data, side, level, &out)?;
            println!("{} of {} clusters flagged at level {level}", report.flagged().len(), report.clusters.len());
            Ok(cli::EXIT_CONVERGED)
        }
        Command::Simulate {
            fit,
            data,
            out,
            replicates,
            seed,
        } => {
            let output = RunOutput::load(&fit)?;
            let dataset = cli::ingest_csv(&data, &output.config)?;
            let sim = cli::simulate_from_fit(&output, &dataset, replicates, seed)?;
            export_csv(&sim, &output.config, &out)?;
            println!("wrote {} clusters", sim.n());
            Ok(cli::EXIT_CONVERGED)
        }
        Command::Trace { fit, out } => {
            let output = RunOutput::load(&fit)?;
            cli::export_trace(&output, std::fs::File::create(&out)?)?;
            Ok(cli::EXIT_CONVERGED)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_USAGE } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| execute(args.command));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e))
        }
    }
}
