//! Mini-batch natural-gradient updates of the global parameters, sweep
//! planning, step-size schedules and resumable checkpoints.

use std::path::Path;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GlmmError, Result};
use crate::ncvmp::{
    finish, lower_bound, optimize_batch, run_full_cycles, stochastic_global_update, FitConfig, FitProgress,
    FitResult, Phase, Problem,
};

/// RNG stream reserved for mini-batch sampling.
pub const BATCH_STREAM: u64 = 1;

pub const CHECKPOINT_FORMAT: &str = "svi-glmm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `a_t = a / (t + A)^α` with `t = s_w + m / M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    pub alpha: f64,
    /// Mini-batches per sweep.
    pub batches: usize,
}

impl StepSchedule {
    pub fn new(a: f64, big_a: f64, alpha: f64, batches: usize) -> Result<Self> {
        if !(a > 0.0) || !(big_a >= 0.0) || !(alpha > 0.5 && alpha <= 1.0) || batches == 0 {
            return Err(GlmmError::InvalidConfig(format!(
                "invalid step schedule a={a}, A={big_a}, alpha={alpha}, M={batches}"
            )));
        }
        if big_a == 0.0 {
            warn!("step_A = 0 leaves the first step undefined; t is floored at 1/M");
        }
        Ok(StepSchedule {
            a,
            big_a,
            alpha,
            batches,
        })
    }

    pub fn step_size(&self, s_w: usize, m: usize) -> f64 {
        let mf = self.batches as f64;
        let mut t = s_w as f64 + m as f64 / mf;
        if self.big_a == 0.0 {
            t = t.max(1.0 / mf);
        }
        self.a / (t + self.big_a).powf(self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule {
    RobbinsMonro(StepSchedule),
    Constant(f64),
}

impl StepRule {
    /// Step for mini-batch `m` of stochastic sweep `s_w`, capped at one.
    pub fn step_size(&self, s_w: usize, m: usize) -> f64 {
        match self {
            StepRule::RobbinsMonro(s) => s.step_size(s_w, m).min(1.0),
            StepRule::Constant(a) => *a,
        }
    }
}

/// Sampling without replacement: a fresh random permutation per sweep.
#[derive(Debug, Clone)]
pub struct SweepSampler {
    seed: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    /// Decimal form of the 128-bit word position.
    pub word_pos: String,
}

impl SweepSampler {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        SweepSampler { seed, rng }
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(position: &RngPosition) -> Result<Self> {
        let word_pos: u128 = position
            .word_pos
            .parse()
            .map_err(|_| GlmmError::Checkpoint("malformed RNG position".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(position.seed);
        rng.set_stream(position.stream);
        rng.set_word_pos(word_pos);
        Ok(SweepSampler {
            seed: position.seed,
            rng,
        })
    }

    /// Splits a random permutation of `0..n` into `⌈n / batch_size⌉` blocks
    /// whose sizes differ by at most one. Each block is sorted.
    pub fn plan_sweep(&mut self, n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 || batch_size > n {
            return Err(GlmmError::InvalidConfig(format!(
                "batch size {batch_size} must lie in 1..={n}"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        let m = n.div_ceil(batch_size);
        let (base, extra) = (n / m, n % m);
        let mut batches = Vec::with_capacity(m);
        let mut start = 0;
        for b in 0..m {
            let len = base + usize::from(b < extra);
            let mut batch = perm[start..start + len].to_vec();
            batch.sort_unstable();
            batches.push(batch);
            start += len;
        }
        Ok(batches)
    }
}

pub fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Resumable state of a stochastic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub progress: FitProgress,
    /// Completed stochastic sweeps `s_w`.
    pub sweep_in_phase: usize,
    /// Next mini-batch `m` within the current sweep.
    pub batch_index: usize,
    pub plan: Vec<Vec<usize>>,
    pub rng: RngPosition,
    pub phase: Phase,
    pub finished: bool,
    pub converged: bool,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(GlmmError::Checkpoint(format!("unrecognized format {:?}", ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(GlmmError::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    Ok(ck)
}

/// SHA-256 over the configuration, step rule and data fingerprint.
pub fn config_hash(problem: &Problem, config: &FitConfig, rule: &StepRule) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).unwrap_or_default());
    h.update(serde_json::to_vec(rule).unwrap_or_default());
    h.update(serde_json::to_vec(&problem.family).unwrap_or_default());
    h.update(serde_json::to_vec(&problem.kind).unwrap_or_default());
    let ds = &problem.dataset;
    h.update(format!("{}:{}:{}:{}", ds.n(), ds.p, ds.r, ds.total_observations()).as_bytes());
    for c in &ds.clusters {
        h.update(c.id.as_bytes());
        for v in c.y.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// A mini-batch was processed inside a sweep.
    Batch,
    /// A stochastic sweep completed.
    Sweep,
    /// The run switched to full-data updates.
    Switched,
    Finished,
}

/// Driver for stochastic message passing followed by full-data cycles.
pub struct SviRunner<'a> {
    problem: &'a Problem,
    config: FitConfig,
    rule: StepRule,
    batch_size: usize,
    progress: FitProgress,
    sampler: SweepSampler,
    plan: Vec<Vec<usize>>,
    sweep_in_phase: usize,
    batch_index: usize,
    phase: Phase,
    finished: bool,
    converged: bool,
    last_step: f64,
    hash: String,
    started: Instant,
}

impl<'a> SviRunner<'a> {
    pub fn new(problem: &'a Problem, config: &FitConfig, rule: StepRule) -> Result<Self> {
        config.validate()?;
        let n = problem.n();
        let batch_size = config.batch_size.unwrap_or(default_batch_size(n)).min(n);
        if let StepRule::Constant(a) = rule {
            if !(a > 0.0 && a <= 1.0) {
                return Err(GlmmError::InvalidConfig(format!("constant step {a} outside (0, 1]")));
            }
        }
        let (global, locals) = problem.initial_state()?;
        Ok(SviRunner {
            problem,
            config: config.clone(),
            rule,
            batch_size,
            progress: FitProgress::new(global, locals),
            sampler: SweepSampler::new(config.seed),
            plan: Vec::new(),
            sweep_in_phase: 0,
            batch_index: 0,
            phase: Phase::Stochastic,
            finished: false,
            converged: false,
            last_step: 0.0,
            hash: config_hash(problem, config, &rule),
            started: Instant::now(),
        })
    }

    /// Runner using the Robbins-Monro schedule from the configuration.
    pub fn from_config(problem: &'a Problem, config: &FitConfig) -> Result<Self> {
        let n = problem.n();
        let batch_size = config.batch_size.unwrap_or(default_batch_size(n)).min(n);
        let schedule = StepSchedule::new(
            config.step_a,
            config.step_big_a,
            config.step_alpha,
            batch_count(n, batch_size),
        )?;
        Self::new(problem, config, StepRule::RobbinsMonro(schedule))
    }

    pub fn resume(problem: &'a Problem, config: &FitConfig, rule: StepRule, checkpoint: Checkpoint) -> Result<Self> {
        let mut runner = Self::new(problem, config, rule)?;
        if checkpoint.config_hash != runner.hash {
            return Err(GlmmError::Checkpoint(
                "configuration or data differ from those that produced the checkpoint".into(),
            ));
        }
        if checkpoint.progress.locals.len() != problem.n() {
            return Err(GlmmError::Checkpoint("checkpoint cluster count does not match the data".into()));
        }
        runner.sampler = SweepSampler::restore(&checkpoint.rng)?;
        let now = Instant::now();
        runner.started = now
            .checked_sub(Duration::from_secs_f64(checkpoint.progress.elapsed_secs.max(0.0)))
            .unwrap_or(now);
        runner.progress = checkpoint.progress;
        runner.progress.elapsed_secs = 0.0;
        runner.plan = checkpoint.plan;
        runner.sweep_in_phase = checkpoint.sweep_in_phase;
        runner.batch_index = checkpoint.batch_index;
        runner.phase = checkpoint.phase;
        runner.finished = checkpoint.finished;
        runner.converged = checkpoint.converged;
        Ok(runner)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut progress = self.progress.clone();
        progress.elapsed_secs = self.started.elapsed().as_secs_f64();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: self.hash.clone(),
            progress,
            sweep_in_phase: self.sweep_in_phase,
            batch_index: self.batch_index,
            plan: self.plan.clone(),
            rng: self.sampler.position(),
            phase: self.phase,
            finished: self.finished,
            converged: self.converged,
        }
    }

    pub fn rule(&self) -> StepRule {
        self.rule
    }

    pub fn progress(&self) -> &FitProgress {
        &self.progress
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Processes one mini-batch; closes the sweep when it was the last one.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.finished {
            return Ok(StepOutcome::Finished);
        }
        if self.phase == Phase::Full {
            return self.run_full();
        }
        if self.progress.sweeps() >= self.config.max_sweeps {
            self.finished = true;
            return Ok(StepOutcome::Finished);
        }
        if self.batch_index == 0 && self.plan.is_empty() {
            self.plan = self.sampler.plan_sweep(self.problem.n(), self.batch_size)?;
        }
        let batch = &self.plan[self.batch_index];
        let step = self.rule.step_size(self.sweep_in_phase, self.batch_index);
        let reps = optimize_batch(
            self.problem,
            batch,
            &self.progress.global,
            &mut self.progress.locals,
            self.config.local_tol,
            self.config.max_local_iter,
        )?;
        self.progress.local_updates += reps * batch.len();
        self.progress.global =
            stochastic_global_update(self.problem, batch, step, &self.progress.global, &self.progress.locals)?;
        self.last_step = step;
        self.batch_index += 1;
        if self.batch_index < self.plan.len() {
            return Ok(StepOutcome::Batch);
        }

        self.batch_index = 0;
        self.plan.clear();
        self.sweep_in_phase += 1;
        self.progress.stochastic_sweeps += 1;
        let bound = lower_bound(self.problem, &self.progress.global, &self.progress.locals)?;
        let elapsed = self.started.elapsed().as_secs_f64();
        let rel = self.progress.record(bound, self.last_step, Phase::Stochastic, elapsed);
        match rel {
            Some(rel) if rel < self.config.stop_tol => {
                info!("stochastic phase converged at sweep {}", self.progress.sweeps());
                self.progress.switched_at = Some(self.progress.sweeps());
                self.phase = Phase::Full;
                self.finished = true;
                self.converged = true;
                Ok(StepOutcome::Finished)
            }
            Some(rel) if rel < self.config.switch_tol => {
                info!("switching to full-data updates after sweep {}", self.progress.sweeps());
                self.progress.switched_at = Some(self.progress.sweeps());
                self.phase = Phase::Full;
                Ok(StepOutcome::Switched)
            }
            _ => Ok(StepOutcome::Sweep),
        }
    }

    fn run_full(&mut self) -> Result<StepOutcome> {
        self.converged = run_full_cycles(self.problem, &self.config, &mut self.progress, self.started)?;
        self.finished = true;
        Ok(StepOutcome::Finished)
    }

    /// Runs stochastic sweeps until the switch, then full-data cycles,
    /// writing a checkpoint after every stochastic sweep when a path is given.
    pub fn run(mut self, checkpoint_path: Option<&Path>) -> Result<FitResult> {
        loop {
            match self.step()? {
                StepOutcome::Finished => break,
                StepOutcome::Sweep | StepOutcome::Switched => {
                    if let Some(path) = checkpoint_path {
                        save_checkpoint(&self.checkpoint(), path)?;
                    }
                }
                StepOutcome::Batch => {}
            }
        }
        if !self.converged {
            warn!("stochastic fit did not converge within {} sweeps", self.config.max_sweeps);
        }
        finish(self.problem, self.progress, self.converged, self.started)
    }
}

/// Roughly 1-2% of the clusters per mini-batch.
pub fn default_batch_size(n: usize) -> usize {
    ((n as f64 * 0.01).round() as usize).clamp(1, n.max(1))
}

/// Stochastic message passing with the configured Robbins-Monro schedule,
/// switching to full-data cycles once sweeps stop paying off.
pub fn fit_svi(problem: &Problem, config: &FitConfig) -> Result<FitResult> {
    SviRunner::from_config(problem, config)?.run(None)
}
