//! Data ingestion, run configuration and orchestration behind the
//! `svi-glmm` binary.

pub mod ingest;
pub mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{Family, ParametrizationKind};
use crate::diagnostics::{Side, DEFAULT_LEVEL};
use crate::error::{GlmmError, Result};
use crate::ncvmp::FitConfig;

pub use ingest::{export_csv, ingest_csv};
pub use run::{export_trace, run_diagnose, run_fit, simulate_from_fit, RunOutput};

/// Name given to the implicit intercept column.
pub const INTERCEPT: &str = "(Intercept)";

pub const EXIT_CONVERGED: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;

/// Process exit code for an error.
pub fn exit_code(err: &GlmmError) -> u8 {
    match err {
        GlmmError::InvalidConfig(_) | GlmmError::Json(_) | GlmmError::Checkpoint(_) => EXIT_USAGE,
        GlmmError::InvalidData(_) | GlmmError::Csv(_) | GlmmError::RankDeficient | GlmmError::StaleLocals { .. } => {
            EXIT_DATA
        }
        _ => EXIT_FAILURE,
    }
}

fn default_true() -> bool {
    true
}

fn default_level() -> f64 {
    DEFAULT_LEVEL
}

/// Everything needed to go from a CSV file to a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub response: String,
    pub cluster: String,
    /// Fixed-effect columns, excluding the intercept.
    #[serde(default)]
    pub fixed: Vec<String>,
    /// Random-effect columns besides the intercept; each must be a fixed column.
    #[serde(default)]
    pub random: Vec<String>,
    /// Poisson exposure column.
    #[serde(default)]
    pub offset: Option<String>,
    pub family: Family,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Columns rescaled to mean 0 and variance 1 before fitting.
    #[serde(default)]
    pub standardize: Vec<String>,
    #[serde(default)]
    pub stochastic: bool,
    #[serde(default)]
    pub side: Side,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(flatten)]
    pub fit: FitConfig,
}

impl ModelConfig {
    pub fn new(response: &str, cluster: &str, family: Family) -> Self {
        ModelConfig {
            response: response.to_string(),
            cluster: cluster.to_string(),
            fixed: Vec::new(),
            random: Vec::new(),
            offset: None,
            family,
            intercept: true,
            standardize: Vec::new(),
            stochastic: false,
            side: Side::default(),
            level: DEFAULT_LEVEL,
            fit: FitConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| GlmmError::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Names of the columns of `X_i`, intercept first when enabled.
    pub fn fixed_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.fixed.len() + 1);
        if self.intercept {
            names.push(INTERCEPT.to_string());
        }
        names.extend(self.fixed.iter().filter(|c| c.as_str() != INTERCEPT).cloned());
        names
    }

    /// Names of the columns of `Z_i`; the intercept always comes first.
    pub fn random_names(&self) -> Vec<String> {
        let mut names = vec![INTERCEPT.to_string()];
        names.extend(self.random.iter().filter(|c| c.as_str() != INTERCEPT).cloned());
        names
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlmmError::InvalidConfig(m));
        if !self.intercept {
            return bad("the random intercept requires `intercept = true`".into());
        }
        for r in self.random.iter().filter(|c| c.as_str() != INTERCEPT) {
            if !self.fixed.contains(r) {
                return bad(format!("random column {r:?} must also be a fixed column"));
            }
        }
        for s in &self.standardize {
            if !self.fixed.contains(s) {
                return bad(format!("standardized column {s:?} is not a fixed column"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for name in self.fixed.iter().chain([&self.response, &self.cluster]) {
            if !seen.insert(name) {
                return bad(format!("column {name:?} is used more than once"));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0, 1)", self.level));
        }
        self.fit.validate()
    }
}

/// Command-line overrides; flags win over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stochastic: bool,
    pub batch_size: Option<usize>,
    pub step_big_a: Option<f64>,
    pub step_alpha: Option<f64>,
    pub parametrization: Option<ParametrizationKind>,
    pub quadrature_order: Option<usize>,
    pub deterministic: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ModelConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.fit.seed = seed;
        }
        if self.stochastic {
            config.stochastic = true;
        }
        if let Some(b) = self.batch_size {
            config.fit.batch_size = Some(b);
        }
        if let Some(a) = self.step_big_a {
            config.fit.step_big_a = a;
        }
        if let Some(alpha) = self.step_alpha {
            config.fit.step_alpha = alpha;
        }
        if let Some(kind) = self.parametrization {
            config.fit.parametrization = kind;
        }
        if let Some(order) = self.quadrature_order {
            config.fit.quadrature_order = order;
        }
        if let Some(d) = self.deterministic {
            config.fit.deterministic = d;
        }
        config.validate()
    }
}
