//! The batch acquisition loop: initial data, per-batch policy optimization,
//! intervention execution, posterior refresh and metric logging.

use std::cell::Cell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{IwnmcConfig, NmcConfig};
use crate::learn::LearnConfig;
use crate::metrics::{self, IMmdConfig};
use crate::optim::{optimize_policy, IwnmcObjective, NmcObjective, OptimizeConfig, TraceRow};
use crate::policy::{
    random_baseline, sample_relaxed, to_design_batch, PolicyMode, PolicyParams, StateRule,
    TempSchedule,
};
use crate::posterior::{
    attach_history, bootstrap_posterior, effective_sample_size, exact_posterior, Dataset,
    ParticleSet,
};
use crate::prior::{sample_particles, sample_scm, PriorSpec};
use crate::rng::{self, RngStream};
use crate::scm::{sample, Design, DesignBatch, Scm};

/// The hidden ground-truth system. Strategies never see the truth; it is
/// sampled through interventions, and read directly only by the metric
/// stage. Access counters make that firewall testable.
pub struct Environment {
    truth: Scm,
    rng: RngStream,
    truth_reads: Cell<usize>,
    draws: Cell<usize>,
}

impl Environment {
    pub fn new(truth: Scm, rng: RngStream) -> Self {
        Environment { truth, rng, truth_reads: Cell::new(0), draws: Cell::new(0) }
    }

    pub fn d(&self) -> usize {
        self.truth.d()
    }

    /// Draws `n` outcomes under one design.
    pub fn draw(&mut self, design: &Design, n: usize) -> Result<Vec<(Design, Vec<f64>)>> {
        self.draws.set(self.draws.get() + 1);
        let m = sample(&self.truth, design, n, &mut self.rng)?;
        Ok(m.values.into_iter().map(|y| (design.clone(), y)).collect())
    }

    /// Direct truth access; only the metric stage should call this.
    pub fn truth(&self) -> &Scm {
        self.truth_reads.set(self.truth_reads.get() + 1);
        &self.truth
    }

    /// (truth reads, executed draws) so far.
    pub fn access_counts(&self) -> (usize, usize) {
        (self.truth_reads.get(), self.draws.get())
    }
}

/// Executes a batch: `n` outcome records per design, tagged with the design.
pub fn execute(
    env: &mut Environment,
    batch: &DesignBatch,
    n: usize,
) -> Result<Vec<(Design, Vec<f64>)>> {
    let mut records = Vec::with_capacity(batch.len() * n);
    for design in &batch.designs {
        design.validate_for(env.d())?;
        records.extend(env.draw(design, n)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Nmc,
    Iwnmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PosteriorChoice {
    Exact { m_per_graph: usize, d_max: usize },
    Bootstrap { k: usize, restarts: usize },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Policy,
    RandomFixed,
    RandomRandom,
}

/// Metric evaluation knobs (interventional MMD sampling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_designs: usize,
    pub n_per_design: usize,
    /// Particle subsample size for i-MMD (0 = use every particle).
    pub max_particles: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_designs: 10, n_per_design: 200, max_particles: 50 }
    }
}

/// Full run configuration with explicit defaults; the echo written at the
/// start of every run materializes all of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub d: usize,
    pub batch_size: usize,
    pub t_batches: usize,
    pub n_initial_obs: usize,
    pub n_per_batch_execution: usize,
    pub estimator: EstimatorChoice,
    pub n_outer: usize,
    pub l_particles: usize,
    pub posterior: PosteriorChoice,
    pub policy_mode: PolicyMode,
    pub steps: usize,
    pub samples_per_step: usize,
    pub learning_rate: f64,
    pub temperature: TempSchedule,
    pub state_lo: f64,
    pub state_hi: f64,
    pub ess_floor: f64,
    /// Separate posterior used only to score recovery metrics; when absent,
    /// metrics are computed from the strategy's own particle set.
    pub eval_posterior: Option<PosteriorChoice>,
    /// Prior for particle sets; defaults to edge probability 0.25 with unit
    /// noise when absent.
    pub prior: Option<PriorSpec>,
    /// Prior for the ground-truth environment; defaults to one expected edge
    /// per vertex when absent.
    pub env_prior: Option<PriorSpec>,
    pub scm_seed: u64,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 5,
            batch_size: 2,
            t_batches: 5,
            n_initial_obs: 60,
            n_per_batch_execution: 1,
            estimator: EstimatorChoice::Nmc,
            n_outer: 30,
            l_particles: 30,
            posterior: PosteriorChoice::Bootstrap { k: 30, restarts: 5 },
            policy_mode: PolicyMode::Single,
            steps: 100,
            samples_per_step: 16,
            learning_rate: 0.1,
            temperature: TempSchedule::default(),
            state_lo: -10.0,
            state_hi: 10.0,
            ess_floor: 2.0,
            eval_posterior: None,
            prior: None,
            env_prior: None,
            scm_seed: 0,
            seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn particle_prior(&self) -> PriorSpec {
        self.prior.clone().unwrap_or_else(|| PriorSpec::particle_default(self.d))
    }

    pub fn environment_prior(&self) -> PriorSpec {
        self.env_prior.clone().unwrap_or_else(|| PriorSpec::environment_default(self.d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.batch_size == 0 {
            return Err(Error::Config("d and batch_size must be >= 1".into()));
        }
        if self.estimator == EstimatorChoice::Nmc && self.posterior == PosteriorChoice::None {
            return Err(Error::Config(
                "the nmc estimator requires a posterior (exact or bootstrap)".into(),
            ));
        }
        if let PolicyMode::MultiConstrained { k } = self.policy_mode {
            if k == 0 || k > self.d {
                return Err(Error::Config(format!("constrained k={k} out of range")));
            }
        }
        let p = self.particle_prior();
        if p.d != self.d {
            return Err(Error::Config("prior dimension differs from d".into()));
        }
        p.validate()?;
        let e = self.environment_prior();
        if e.d != self.d {
            return Err(Error::Config("environment prior dimension differs from d".into()));
        }
        e.validate()
    }
}

/// Draws the hidden environment: the truth depends only on `scm_seed`, the
/// observation noise stream only on `seed`.
pub fn make_environment(config: &RunConfig) -> Result<Environment> {
    let truth = sample_scm(&config.environment_prior(), &mut rng::stream(config.scm_seed))?;
    let mut master = rng::stream(config.seed);
    let env_rng = rng::child(&mut master);
    Ok(Environment::new(truth, env_rng))
}

/// One metrics.csv row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub batch_index: usize,
    pub e_shd: f64,
    pub f1: f64,
    pub i_mmd: f64,
    pub ess: f64,
    pub seed: u64,
}

/// Executed designs for one batch, as written to designs.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLogRow {
    pub batch_index: usize,
    pub designs: Vec<Design>,
}

/// In-memory artifacts of a run.
#[derive(Debug)]
pub struct RunOutput {
    pub metric_rows: Vec<MetricRow>,
    pub trace: Vec<TraceRow>,
    pub design_log: Vec<DesignLogRow>,
    pub final_particles: ParticleSet,
}

/// Incremental writer for the run directory layout: config.json echo,
/// trace.jsonl, designs.jsonl, metrics.csv, particles_final.json. Every
/// append flushes, so an interrupted run leaves valid partial files.
pub struct RunWriter {
    dir: PathBuf,
    trace: BufWriter<File>,
    designs: BufWriter<File>,
    metrics: BufWriter<File>,
}

pub const METRICS_HEADER: &str = "batch_index,e_shd,f1,i_mmd,ess,seed";

impl RunWriter {
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let echo = serde_json::to_string_pretty(config)?;
        fs::write(dir.join("config.json"), echo)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(
                OpenOptions::new().create(true).write(true).truncate(true).open(dir.join(name))?,
            ))
        };
        let mut metrics = open("metrics.csv")?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        metrics.flush()?;
        Ok(RunWriter { dir: dir.to_path_buf(), trace: open("trace.jsonl")?, designs: open("designs.jsonl")?, metrics })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append_trace(&mut self, rows: &[TraceRow], step_offset: usize) -> Result<()> {
        for row in rows {
            let ess = match row.ess {
                Some(v) => format!("{v}"),
                None => "null".to_string(),
            };
            writeln!(
                self.trace,
                "{{\"step\":{},\"eig_value\":{},\"temperature\":{},\"ess\":{},\"grad_norm\":{}}}",
                step_offset + row.step,
                row.eig_value,
                row.temperature,
                ess,
                row.grad_norm
            )?;
        }
        self.trace.flush()?;
        Ok(())
    }

    fn append_designs(&mut self, row: &DesignLogRow) -> Result<()> {
        writeln!(self.designs, "{}", serde_json::to_string(row)?)?;
        self.designs.flush()?;
        Ok(())
    }

    fn append_metrics(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(
            self.metrics,
            "{},{},{},{},{},{}",
            row.batch_index, row.e_shd, row.f1, row.i_mmd, row.ess, row.seed
        )?;
        self.metrics.flush()?;
        Ok(())
    }

    fn finalize(&mut self, particles: &ParticleSet) -> Result<()> {
        fs::write(self.dir.join("particles_final.json"), serde_json::to_string(particles)?)?;
        Ok(())
    }
}

/// Fits or refreshes the particle representation from the current dataset,
/// per the configured posterior choice. With `posterior = none`, fresh prior
/// particles are reweighted by the history (the prior-only pathway); with
/// the IWNMC estimator, posterior particles also get history likelihoods
/// attached so they can serve as a proposal.
pub fn fit_particles(
    config: &RunConfig,
    dataset: &Dataset,
    particles_master: &mut RngStream,
) -> Result<ParticleSet> {
    fit_particles_with(config, config.posterior, dataset, particles_master)
}

fn fit_particles_with(
    config: &RunConfig,
    posterior: PosteriorChoice,
    dataset: &Dataset,
    particles_master: &mut RngStream,
) -> Result<ParticleSet> {
    let mut sub = rng::child(particles_master);
    let set = match posterior {
        PosteriorChoice::None => {
            let prior = sample_particles(&config.particle_prior(), config.l_particles, &mut sub)?;
            attach_history(&prior, dataset)
        }
        PosteriorChoice::Exact { m_per_graph, d_max } => {
            let set =
                exact_posterior(dataset, &config.particle_prior(), d_max, m_per_graph, &mut sub)?;
            if config.estimator == EstimatorChoice::Iwnmc {
                attach_history(&set, dataset)
            } else {
                set
            }
        }
        PosteriorChoice::Bootstrap { k, restarts } => {
            let cfg = LearnConfig { restarts, ..Default::default() };
            let set = if dataset.is_empty() {
                sample_particles(&config.particle_prior(), k.max(2), &mut sub)?
            } else {
                bootstrap_posterior(dataset, k, &cfg, &mut sub)?
            };
            if config.estimator == EstimatorChoice::Iwnmc {
                attach_history(&set, dataset)
            } else {
                set
            }
        }
    };
    Ok(set)
}

/// Produces one executable design batch: either by optimizing the policy
/// against the current particles, or from a random baseline. Returns the
/// batch, the optimizer trace, and the final policy when one was trained.
pub fn design_step(
    config: &RunConfig,
    strategy: Strategy,
    particles: &ParticleSet,
    policy_master: &mut RngStream,
) -> Result<(DesignBatch, Vec<TraceRow>, Option<PolicyParams>)> {
    let mut sub = rng::child(policy_master);
    match strategy {
        Strategy::RandomFixed => {
            let value = match config.policy_mode {
                PolicyMode::Single => 0.0,
                _ => 5.0,
            };
            let batch = random_baseline(
                config.policy_mode,
                StateRule::Fixed { value },
                config.batch_size,
                config.d,
                &mut sub,
            )?;
            Ok((batch, Vec::new(), None))
        }
        Strategy::RandomRandom => {
            let batch = random_baseline(
                config.policy_mode,
                StateRule::Uniform { lo: config.state_lo, hi: config.state_hi },
                config.batch_size,
                config.d,
                &mut sub,
            )?;
            Ok((batch, Vec::new(), None))
        }
        Strategy::Policy => {
            let init_temp = match config.temperature {
                TempSchedule::Fixed { value } => value,
                TempSchedule::Geometric { start, .. } => start,
            };
            // zero logits, states spread over the design range: states carry
            // information from the first step, so target selection is
            // compared at meaningful interventions rather than all-zero ones
            let states0: Vec<Vec<f64>> = (0..config.batch_size)
                .map(|_| {
                    (0..config.d)
                        .map(|_| {
                            let u: f64 = sub.random();
                            0.8 * (config.state_lo + (config.state_hi - config.state_lo) * u)
                        })
                        .collect()
                })
                .collect();
            let params = PolicyParams::new(
                config.policy_mode,
                crate::math::zeros(config.batch_size, config.d),
                states0,
                init_temp,
            )?;
            let opt_cfg = OptimizeConfig {
                steps: config.steps,
                samples_per_step: config.samples_per_step,
                adam: crate::optim::AdamConfig {
                    learning_rate: config.learning_rate,
                    ..Default::default()
                },
                schedule: config.temperature,
                state_bounds: (config.state_lo, config.state_hi),
            };
            let (final_params, trace) = match config.estimator {
                EstimatorChoice::Nmc => {
                    let objective = NmcObjective {
                        set: particles,
                        cfg: NmcConfig {
                            n_outer: config.n_outer,
                            l: config.l_particles.min(particles.len()),
                            include_outer_in_contrastive: false,
                        },
                    };
                    optimize_policy(&objective, params, &opt_cfg, &mut sub)?
                }
                EstimatorChoice::Iwnmc => {
                    let objective = IwnmcObjective {
                        set: particles,
                        cfg: IwnmcConfig { ess_floor: config.ess_floor },
                    };
                    optimize_policy(&objective, params, &opt_cfg, &mut sub)?
                }
            };
            let relaxed = sample_relaxed(&final_params, &mut sub);
            Ok((to_design_batch(&relaxed)?, trace, Some(final_params)))
        }
    }
}

fn metric_row(
    config: &RunConfig,
    batch_index: usize,
    metric_particles: &ParticleSet,
    strategy_ess: f64,
    env: &Environment,
    metrics_master: &mut RngStream,
) -> MetricRow {
    let mut sub = rng::child(metrics_master);
    let immd_cfg = IMmdConfig {
        n_designs: config.eval.n_designs,
        state_lo: config.state_lo,
        state_hi: config.state_hi,
        max_particles: config.eval.max_particles,
    };
    let report = metrics::evaluate(
        metric_particles,
        env.truth(),
        &immd_cfg,
        config.eval.n_per_design,
        &mut sub,
    );
    MetricRow {
        batch_index,
        e_shd: report.e_shd,
        f1: report.f1,
        i_mmd: report.i_mmd,
        ess: strategy_ess,
        seed: config.seed,
    }
}

/// Runs the full acquisition loop with the given strategy.
///
/// Sequence: draw the initial observational data, fit particles, log metrics
/// for batch 0; then for each batch optimize (or randomize) a design batch,
/// execute it, refit on the grown dataset and log metrics.
pub fn run(
    config: &RunConfig,
    env: &mut Environment,
    strategy: Strategy,
    mut writer: Option<&mut RunWriter>,
) -> Result<RunOutput> {
    config.validate()?;
    if env.d() != config.d {
        return Err(Error::Dimension("environment dimension differs from config".into()));
    }
    let mut master = rng::stream(config.seed);
    let _env_seed = rng::child(&mut master); // consumed by make_environment
    let mut particles_master = rng::child(&mut master);
    let mut policy_master = rng::child(&mut master);
    let mut metrics_master = rng::child(&mut master);
    let mut eval_master = rng::child(&mut master);

    let mut dataset = Dataset::new();
    if config.n_initial_obs > 0 {
        dataset.extend(env.draw(&Design::observational(), config.n_initial_obs)?);
    }

    let mut particles = fit_particles(config, &dataset, &mut particles_master)?;
    let mut metric_rows = Vec::new();
    let mut trace_all = Vec::new();
    let mut design_log = Vec::new();

    let mut score = |config: &RunConfig,
                     t: usize,
                     particles: &ParticleSet,
                     dataset: &Dataset,
                     env: &Environment,
                     metrics_master: &mut RngStream,
                     eval_master: &mut RngStream|
     -> Result<MetricRow> {
        let ess = effective_sample_size(particles);
        let row = match config.eval_posterior {
            Some(choice) => {
                let eval_set = fit_particles_with(config, choice, dataset, eval_master)?;
                metric_row(config, t, &eval_set, ess, env, metrics_master)
            }
            None => metric_row(config, t, particles, ess, env, metrics_master),
        };
        Ok(row)
    };

    let row0 = score(config, 0, &particles, &dataset, env, &mut metrics_master, &mut eval_master)?;
    if let Some(w) = writer.as_deref_mut() {
        w.append_metrics(&row0)?;
    }
    metric_rows.push(row0);

    for t in 1..=config.t_batches {
        let (batch, trace, _policy) = design_step(config, strategy, &particles, &mut policy_master)?;
        if let Some(w) = writer.as_deref_mut() {
            w.append_trace(&trace, (t - 1) * config.steps)?;
        }
        trace_all.extend(trace);

        let fragment = execute(env, &batch, config.n_per_batch_execution)?;
        dataset.extend(fragment);
        let log_row = DesignLogRow { batch_index: t, designs: batch.designs.clone() };
        if let Some(w) = writer.as_deref_mut() {
            w.append_designs(&log_row)?;
        }
        design_log.push(log_row);

        particles = fit_particles(config, &dataset, &mut particles_master)?;
        let row =
            score(config, t, &particles, &dataset, env, &mut metrics_master, &mut eval_master)?;
        if let Some(w) = writer.as_deref_mut() {
            w.append_metrics(&row)?;
        }
        metric_rows.push(row);
    }

    if let Some(w) = writer.as_deref_mut() {
        w.finalize(&particles)?;
    }
    Ok(RunOutput { metric_rows, trace: trace_all, design_log, final_particles: particles })
}

/// The designed-policy pathway.
pub fn run_loop(
    config: &RunConfig,
    env: &mut Environment,
    writer: Option<&mut RunWriter>,
) -> Result<RunOutput> {
    run(config, env, Strategy::Policy, writer)
}

/// Random baselines share the loop; only design selection differs.
pub fn run_baseline(
    config: &RunConfig,
    env: &mut Environment,
    baseline: Strategy,
    writer: Option<&mut RunWriter>,
) -> Result<RunOutput> {
    if baseline == Strategy::Policy {
        return Err(Error::Config("run_baseline expects a random strategy".into()));
    }
    run(config, env, baseline, writer)
}
