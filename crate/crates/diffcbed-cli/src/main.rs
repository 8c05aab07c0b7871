//! Command-line runner: sample synthetic environments, evaluate EIG
//! landscapes, optimize design batches, run acquisition loops and score
//! recovered posteriors. Every invocation echoes its effective configuration
//! into the output directory before computing anything.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use diffcbed_core::acquisition::{
    design_step, fit_particles, make_environment, run, MetricRow, PosteriorChoice, RunConfig,
    RunOutput, RunWriter, Strategy, METRICS_HEADER,
};
use diffcbed_core::error::Error as CoreError;
use diffcbed_core::estimator::{eig_grid, NmcConfig};
use diffcbed_core::metrics::{self, IMmdConfig};
use diffcbed_core::policy::PolicyCheckpoint;
use diffcbed_core::posterior::{effective_sample_size, exact_posterior, Dataset, ParticleSet};
use diffcbed_core::rng;
use diffcbed_core::scm::{Design, Scm};

#[derive(Parser)]
#[command(name = "diffcbed", version, about = "Batch experimental design for causal discovery")]
struct Cli {
    /// Print progress information to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (falls back to $DIFFCBED_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the ground-truth SCM and write sample files.
    Sample(CommonArgs),
    /// Evaluate the EIG landscape over a grid of fixed designs.
    EigGrid(CommonArgs),
    /// Optimize one design batch and write the policy checkpoint.
    Design {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the acquisition loop, optionally sweeping seeds.
    Loop {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated seed list for a sweep (per-seed subdirectories).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Concurrent replicas for a sweep.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// policy | random_fixed | random_random
        #[arg(long, default_value = "policy")]
        strategy: String,
    },
    /// Score a particle file against a truth SCM file.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Particle set JSON.
        #[arg(long)]
        particles: PathBuf,
        /// Ground-truth SCM JSON.
        #[arg(long)]
        truth: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Capability(_) | CoreError::Dimension(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Grid evaluation settings for the eig-grid subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
struct GridConfig {
    state_lo: f64,
    state_hi: f64,
    steps: usize,
    n_outer: usize,
    l: usize,
    /// Target tuple per design slot; defaults to every single-target
    /// combination when omitted.
    targets: Option<Vec<Vec<usize>>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { state_lo: -20.0, state_hi: 20.0, steps: 41, n_outer: 2000, l: 64, targets: None }
    }
}

/// Settings for the sample subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
struct SampleConfig {
    /// Observational rows to draw.
    n: usize,
    /// Extra interventional designs, each sampled `n_per_design` times.
    designs: Vec<Design>,
    n_per_design: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n: 100, designs: Vec::new(), n_per_design: 100 }
    }
}

/// One configuration document drives every subcommand; the run section is
/// flattened at the top level.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct CliConfig {
    #[serde(flatten)]
    run: RunConfig,
    grid: GridConfig,
    sample: SampleConfig,
}

fn load_config(args: &CommonArgs) -> CliResult<CliConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {:?}: {e}", args.config)))?;
    let mut config: CliConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {:?}: {e}", args.config)))?;
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    config.run.validate()?;
    Ok(config)
}

fn out_dir(args: &CommonArgs) -> CliResult<PathBuf> {
    if let Some(dir) = &args.out {
        return Ok(dir.clone());
    }
    if let Ok(env) = std::env::var("DIFFCBED_OUT") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    Err(CliError::Usage("no output directory: pass --out or set DIFFCBED_OUT".into()))
}

/// The config echo is written before any computation.
fn write_echo(dir: &Path, config: &CliConfig) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let echo = serde_json::to_string_pretty(config)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(dir.join("config.json"), echo)?;
    Ok(())
}

fn format_targets(targets: &[usize]) -> String {
    targets.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";")
}

fn format_states(states: &[f64]) -> String {
    states.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

fn cmd_sample(args: &CommonArgs, verbose: bool) -> CliResult<()> {
    let config = load_config(args)?;
    let dir = out_dir(args)?;
    write_echo(&dir, &config)?;
    let mut env = make_environment(&config.run)?;
    fs::write(
        dir.join("scm.json"),
        serde_json::to_string_pretty(env.truth()).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    let d = env.d();
    let mut rows = String::new();
    rows.push_str("targets,states");
    for j in 0..d {
        rows.push_str(&format!(",x_{j}"));
    }
    rows.push('\n');
    let mut emit = |design: &Design, n: usize, env: &mut diffcbed_core::acquisition::Environment|
     -> CliResult<()> {
        for (design, y) in env.draw(design, n)? {
            rows.push_str(&format_targets(design.targets()));
            rows.push(',');
            rows.push_str(&format_states(design.states()));
            for v in y {
                rows.push_str(&format!(",{v}"));
            }
            rows.push('\n');
        }
        Ok(())
    };
    emit(&Design::observational(), config.sample.n, &mut env)?;
    for design in &config.sample.designs {
        emit(design, config.sample.n_per_design, &mut env)?;
    }
    fs::write(dir.join("samples.csv"), rows)?;
    if verbose {
        eprintln!("sample: wrote scm.json and samples.csv to {}", dir.display());
    }
    Ok(())
}

fn cmd_eig_grid(args: &CommonArgs, verbose: bool) -> CliResult<()> {
    let config = load_config(args)?;
    let dir = out_dir(args)?;
    write_echo(&dir, &config)?;
    let run = &config.run;
    let grid = &config.grid;

    let mut env = make_environment(run)?;
    let mut master = rng::stream(run.seed);
    let _env_child = rng::child(&mut master);
    let mut particles_rng = rng::child(&mut master);
    let mut grid_rng = rng::child(&mut master);

    let mut dataset = Dataset::new();
    if run.n_initial_obs > 0 {
        dataset.extend(env.draw(&Design::observational(), run.n_initial_obs)?);
    }
    let (m_per_graph, d_max) = match run.posterior {
        PosteriorChoice::Exact { m_per_graph, d_max } => (m_per_graph, d_max),
        _ => (2000, 4),
    };
    let set = exact_posterior(&dataset, &run.particle_prior(), d_max, m_per_graph, &mut particles_rng)?;

    let b = run.batch_size;
    let targets: Vec<Vec<usize>> = match &grid.targets {
        Some(t) => t.clone(),
        None => {
            let mut tuples = vec![Vec::new()];
            for _ in 0..b {
                tuples = tuples
                    .into_iter()
                    .flat_map(|prefix: Vec<usize>| {
                        (0..run.d).map(move |t| {
                            let mut next = prefix.clone();
                            next.push(t);
                            next
                        })
                    })
                    .collect();
            }
            tuples
        }
    };
    let axis: Vec<f64> = (0..grid.steps)
        .map(|i| {
            grid.state_lo
                + (grid.state_hi - grid.state_lo) * i as f64 / (grid.steps - 1).max(1) as f64
        })
        .collect();
    let cfg = NmcConfig { n_outer: grid.n_outer, l: grid.l, include_outer_in_contrastive: false };
    let points = eig_grid(&set, &targets, &axis, &cfg, &mut grid_rng);

    let mut csv = String::from("target_spec");
    for i in 1..=b {
        csv.push_str(&format!(",state_{i}"));
    }
    csv.push_str(",eig_nats\n");
    for p in &points {
        csv.push_str(
            &p.targets.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-"),
        );
        for s in &p.states {
            csv.push_str(&format!(",{s}"));
        }
        csv.push_str(&format!(",{}\n", p.value));
    }
    fs::write(dir.join("grid.csv"), csv)?;
    if verbose {
        eprintln!("eig-grid: wrote {} grid points to {}", points.len(), dir.display());
    }
    Ok(())
}

fn cmd_design(args: &CommonArgs, verbose: bool) -> CliResult<()> {
    let config = load_config(args)?;
    let dir = out_dir(args)?;
    write_echo(&dir, &config)?;
    let run_cfg = &config.run;
    let mut env = make_environment(run_cfg)?;
    let mut master = rng::stream(run_cfg.seed);
    let _env_child = rng::child(&mut master);
    let mut particles_rng = rng::child(&mut master);
    let mut policy_rng = rng::child(&mut master);

    let mut dataset = Dataset::new();
    if run_cfg.n_initial_obs > 0 {
        dataset.extend(env.draw(&Design::observational(), run_cfg.n_initial_obs)?);
    }
    let particles = fit_particles(run_cfg, &dataset, &mut particles_rng)?;
    let (batch, trace, policy) = design_step(run_cfg, Strategy::Policy, &particles, &mut policy_rng)?;

    if let Some(p) = policy {
        let checkpoint = PolicyCheckpoint::from(&p);
        fs::write(
            dir.join("policy.json"),
            serde_json::to_string_pretty(&checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?,
        )?;
    }
    let mut trace_text = String::new();
    for row in &trace {
        let ess = row.ess.map_or("null".to_string(), |v| v.to_string());
        trace_text.push_str(&format!(
            "{{\"step\":{},\"eig_value\":{},\"temperature\":{},\"ess\":{},\"grad_norm\":{}}}\n",
            row.step, row.eig_value, row.temperature, ess, row.grad_norm
        ));
    }
    fs::write(dir.join("trace.jsonl"), trace_text)?;
    let log = serde_json::json!({ "batch_index": 1, "designs": batch.designs });
    fs::write(dir.join("designs.jsonl"), format!("{log}\n"))?;
    if verbose {
        eprintln!("design: wrote policy.json and designs.jsonl to {}", dir.display());
    }
    Ok(())
}

fn parse_strategy(name: &str) -> CliResult<Strategy> {
    match name {
        "policy" => Ok(Strategy::Policy),
        "random_fixed" => Ok(Strategy::RandomFixed),
        "random_random" => Ok(Strategy::RandomRandom),
        other => Err(CliError::Usage(format!(
            "unknown strategy {other:?} (expected policy, random_fixed or random_random)"
        ))),
    }
}

fn run_one_seed(
    config: &CliConfig,
    strategy: Strategy,
    seed: u64,
    dir: &Path,
) -> CliResult<RunOutput> {
    let mut run_cfg = config.run.clone();
    run_cfg.seed = seed;
    let echo = CliConfig { run: run_cfg.clone(), ..config.clone() };
    fs::create_dir_all(dir)?;
    write_echo(dir, &echo)?;
    let mut writer = RunWriter::create(dir, &run_cfg)?;
    let mut env = make_environment(&run_cfg)?;
    Ok(run(&run_cfg, &mut env, strategy, Some(&mut writer))?)
}

fn cmd_loop(
    common: &CommonArgs,
    seeds: &Option<Vec<u64>>,
    jobs: usize,
    strategy_name: &str,
    verbose: bool,
) -> CliResult<()> {
    let config = load_config(common)?;
    let strategy = parse_strategy(strategy_name)?;
    let dir = out_dir(common)?;

    let Some(seed_list) = seeds.clone() else {
        // single run straight into the output directory
        let out = run_one_seed(&config, strategy, config.run.seed, &dir)?;
        if verbose {
            eprintln!("loop: {} metric rows in {}", out.metric_rows.len(), dir.display());
        }
        return Ok(());
    };

    write_echo(&dir, &config)?;
    let jobs = jobs.max(1);
    let results: Mutex<Vec<(usize, Result<RunOutput, String>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for worker in 0..jobs.min(seed_list.len()) {
            let seed_list = &seed_list;
            let config = &config;
            let results = &results;
            let dir = &dir;
            scope.spawn(move || {
                let mut pos = worker;
                while pos < seed_list.len() {
                    let seed = seed_list[pos];
                    let sub = dir.join(format!("seed-{seed}"));
                    let res = run_one_seed(config, strategy, seed, &sub)
                        .map_err(|e| format!("seed {seed}: {e:?}"));
                    results.lock().unwrap().push((pos, res));
                    pos += jobs;
                }
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(pos, _)| *pos);

    let mut failures = Vec::new();
    let mut outputs = Vec::new();
    for (pos, res) in results {
        match res {
            Ok(out) => outputs.push(out),
            Err(msg) => {
                eprintln!("replica failed: {msg}");
                failures.push(seed_list[pos]);
            }
        }
    }
    if !outputs.is_empty() {
        let n_batches = outputs[0].metric_rows.len();
        let mut csv = String::from(
            "batch_index,n_seeds,e_shd_mean,e_shd_ci95,f1_mean,f1_ci95,i_mmd_mean,i_mmd_ci95\n",
        );
        for t in 0..n_batches {
            let rows: Vec<&MetricRow> =
                outputs.iter().filter_map(|o| o.metric_rows.get(t)).collect();
            let n = rows.len() as f64;
            let stat = |f: &dyn Fn(&MetricRow) -> f64| -> (f64, f64) {
                let mean = rows.iter().map(|r| f(r)).sum::<f64>() / n;
                let var = rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n.max(1.0);
                (mean, 1.96 * (var / n).sqrt())
            };
            let (shd_m, shd_hw) = stat(&|r: &MetricRow| r.e_shd);
            let (f1_m, f1_hw) = stat(&|r: &MetricRow| r.f1);
            let (immd_m, immd_hw) = stat(&|r: &MetricRow| r.i_mmd);
            csv.push_str(&format!(
                "{t},{},{shd_m},{shd_hw},{f1_m},{f1_hw},{immd_m},{immd_hw}\n",
                rows.len()
            ));
        }
        fs::write(dir.join("aggregate.csv"), csv)?;
    }
    if verbose {
        eprintln!(
            "loop: {} of {} replicas succeeded in {}",
            outputs.len(),
            seed_list.len(),
            dir.display()
        );
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} replica(s) failed: {failures:?}", failures.len())))
    }
}

fn cmd_evaluate(
    common: &CommonArgs,
    particles_path: &Path,
    truth_path: &Path,
    verbose: bool,
) -> CliResult<()> {
    let config = load_config(common)?;
    let dir = out_dir(common)?;
    write_echo(&dir, &config)?;
    let particles: ParticleSet = serde_json::from_str(
        &fs::read_to_string(particles_path)
            .map_err(|e| CliError::Usage(format!("cannot read {particles_path:?}: {e}")))?,
    )
    .map_err(|e| CliError::Usage(format!("invalid particle file: {e}")))?;
    let truth: Scm = serde_json::from_str(
        &fs::read_to_string(truth_path)
            .map_err(|e| CliError::Usage(format!("cannot read {truth_path:?}: {e}")))?,
    )
    .map_err(|e| CliError::Usage(format!("invalid SCM file: {e}")))?;
    if particles.d() != truth.d() {
        return Err(CliError::Usage("particle and truth dimensions differ".into()));
    }
    let run_cfg = &config.run;
    let immd_cfg = IMmdConfig {
        n_designs: run_cfg.eval.n_designs,
        state_lo: run_cfg.state_lo,
        state_hi: run_cfg.state_hi,
        max_particles: run_cfg.eval.max_particles,
    };
    let mut rng = rng::stream(run_cfg.seed);
    let report =
        metrics::evaluate(&particles, &truth, &immd_cfg, run_cfg.eval.n_per_design, &mut rng);
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    csv.push_str(&format!(
        "0,{},{},{},{},{}\n",
        report.e_shd,
        report.f1,
        report.i_mmd,
        effective_sample_size(&particles),
        run_cfg.seed
    ));
    fs::write(dir.join("metrics.csv"), csv)?;
    if verbose {
        eprintln!("evaluate: e_shd {} f1 {} i_mmd {}", report.e_shd, report.f1, report.i_mmd);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Sample(common) => cmd_sample(common, cli.verbose),
        Command::EigGrid(common) => cmd_eig_grid(common, cli.verbose),
        Command::Design { common } => cmd_design(common, cli.verbose),
        Command::Loop { common, seeds, jobs, strategy } => {
            cmd_loop(common, seeds, *jobs, strategy, cli.verbose)
        }
        Command::Evaluate { common, particles, truth } => {
            cmd_evaluate(common, particles, truth, cli.verbose)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
