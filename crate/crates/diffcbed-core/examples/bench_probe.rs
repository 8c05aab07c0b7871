use diffcbed_core::acquisition::*;
use diffcbed_core::learn::LearnConfig;
use diffcbed_core::metrics::expected_shd;
use diffcbed_core::policy::{PolicyMode, TempSchedule};
use diffcbed_core::posterior::{bootstrap_posterior, Dataset};
use diffcbed_core::rng::stream;
use diffcbed_core::scm::Design;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(26);
    let seed0: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let n_exec: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(30);
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.2);

    let base = RunConfig {
        d: 5, batch_size: 2, t_batches: 5, n_initial_obs: 2, n_per_batch_execution: n_exec,
        estimator: EstimatorChoice::Iwnmc, posterior: PosteriorChoice::None,
        l_particles: 1000, policy_mode: PolicyMode::MultiUnconstrained,
        steps, samples_per_step: 4, learning_rate: lr,
        temperature: TempSchedule::Geometric { start: 5.0, end: 0.5 },
        eval: EvalConfig { n_designs: 8, n_per_design: 50, max_particles: 20 },
        ..Default::default()
    };
    let t0 = Instant::now();
    let (mut w_snis, mut w_boot) = (0, 0);
    let (mut t_snis, mut t_boot) = (0, 0);
    let replay_boot = |out: &RunOutput, cfg: &RunConfig, truth: &diffcbed_core::scm::Scm| -> f64 {
        let mut env = make_environment(cfg).unwrap();
        let mut data = Dataset::new();
        data.extend(env.draw(&Design::observational(), cfg.n_initial_obs).unwrap());
        for row in &out.design_log {
            for dsg in &row.designs {
                data.extend(env.draw(dsg, cfg.n_per_batch_execution).unwrap());
            }
        }
        let set = bootstrap_posterior(&data, 30, &LearnConfig { restarts: 3, ..Default::default() }, &mut stream(cfg.seed ^ 0xeeee)).unwrap();
        expected_shd(&set, truth.dag())
    };
    for seed in seed0..seed0 + n_seeds {
        let mut cfg = base.clone();
        cfg.scm_seed = 1000 + seed;
        cfg.seed = 2000 + seed;
        let truth = diffcbed_core::prior::sample_scm(&cfg.environment_prior(), &mut stream(cfg.scm_seed)).unwrap();
        let mut env_d = make_environment(&cfg).unwrap();
        let designed = run_loop(&cfg, &mut env_d, None).unwrap();
        let mut env_r = make_environment(&cfg).unwrap();
        let random = run_baseline(&cfg, &mut env_r, Strategy::RandomRandom, None).unwrap();
        let ds = designed.metric_rows.last().unwrap().e_shd;
        let rs = random.metric_rows.last().unwrap().e_shd;
        let db = replay_boot(&designed, &cfg, &truth);
        let rb = replay_boot(&random, &cfg, &truth);
        if ds < rs { w_snis += 1; } else if ds == rs { t_snis += 1; }
        if db < rb { w_boot += 1; } else if db == rb { t_boot += 1; }
        println!("seed {seed}: snis {ds:.2} vs {rs:.2} | boot {db:.2} vs {rb:.2}");
    }
    println!("SNIS wins {w_snis}/{n_seeds} ties {t_snis}; BOOT wins {w_boot}/{n_seeds} ties {t_boot}; {:?}", t0.elapsed());
}
