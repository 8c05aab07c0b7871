use diffcbed_core::estimator::*;
use diffcbed_core::optim::*;
use diffcbed_core::policy::*;
use diffcbed_core::posterior::{exact_posterior, Dataset};
use diffcbed_core::prior::{NoiseSpec, PriorSpec};
use diffcbed_core::rng::{child, stream};
use diffcbed_core::scm::{sample, Dag, Design, Scm};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let t0 = Instant::now();
    let mut pass = 0;
    for seed in 0..n_seeds {
        // truth: 2-node chain, weight 2, unit noise
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let mut w = vec![vec![0.0; 2]; 2];
        w[0][1] = 2.0;
        let truth = Scm::new(dag, w, vec![1.0, 1.0]).unwrap();
        let mut env_rng = stream(9000 + seed);
        let m = sample(&truth, &Design::observational(), 60, &mut env_rng).unwrap();
        let mut data = Dataset::new();
        for y in m.values { data.push(Design::observational(), y); }
        let mut prior = PriorSpec::particle_default(2);
        prior.noise = NoiseSpec::squared_normal();
        let mut master = stream(7000 + seed);
        let set = exact_posterior(&data, &prior, 4, 1500, &mut child(&mut master)).unwrap();

        // grid oracle
        let axis: Vec<f64> = (0..21).map(|i| -10.0 + i as f64).collect();
        let pairs = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
        let grid_cfg = NmcConfig { n_outer: 800, l: 48, include_outer_in_contrastive: false };
        let grid = eig_grid(&set, &pairs, &axis, &grid_cfg, &mut child(&mut master));
        let best = grid.iter().max_by(|a, b| a.value.partial_cmp(&b.value).unwrap()).unwrap();

        // policy optimization
        let objective = NmcObjective { set: &set, cfg: NmcConfig { n_outer: 48, l: 48, include_outer_in_contrastive: false } };
        let mut init_rng = child(&mut master);
        let states0: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| {
            use rand::Rng;
            16.0 * init_rng.random::<f64>() - 8.0
        }).collect()).collect();
        let params = PolicyParams::new(PolicyMode::Single, vec![vec![0.0; 2]; 2], states0, 5.0).unwrap();
        let opt = OptimizeConfig {
            steps: 250, samples_per_step: 8,
            adam: AdamConfig { learning_rate: 0.25, ..Default::default() },
            schedule: TempSchedule::Geometric { start: 5.0, end: 0.5 },
            state_bounds: (-10.0, 10.0),
        };
        let (fp, _) = optimize_policy(&objective, params, &opt, &mut child(&mut master)).unwrap();
        // modal design
        let mut pol_masks = vec![vec![0.0; 2]; 2];
        let mut pol_states = vec![vec![0.0; 2]; 2];
        for row in 0..2 {
            let t = if fp.target_logits[row][0] >= fp.target_logits[row][1] { 0 } else { 1 };
            pol_masks[row][t] = 1.0;
            pol_states[row][t] = fp.state_values[row][t];
        }
        // high-precision shared plan
        let hp = NmcConfig { n_outer: 20000, l: 256, include_outer_in_contrastive: false };
        let plan = draw_nmc_plan(&set, &hp, 2, &mut child(&mut master));
        let mut grid_masks = vec![vec![0.0; 2]; 2];
        let mut grid_states = vec![vec![0.0; 2]; 2];
        for row in 0..2 {
            grid_masks[row][best.targets[row]] = 1.0;
            grid_states[row][best.targets[row]] = best.states[row];
        }
        let v_grid = nmc_value(&set, &hp, &plan, &DesignEval { masks: &grid_masks, states: &grid_states });
        let v_pol = nmc_value(&set, &hp, &plan, &DesignEval { masks: &pol_masks, states: &pol_states });
        let ratio = v_pol / v_grid;
        let ok = v_pol >= 0.95 * v_grid;
        if ok { pass += 1; }
        println!("seed {seed}: grid max {:.4} at {:?}/{:?}; policy {:.4} ({:?}); ratio {:.3} {}",
            v_grid, best.targets, best.states, v_pol,
            (0..2).map(|r| (pol_masks[r].iter().position(|&x| x == 1.0).unwrap(), (pol_states[r].iter().cloned().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a })*100.0).round()/100.0)).collect::<Vec<_>>(),
            ratio, if ok { "PASS" } else { "FAIL" });
    }
    println!("pass {pass}/{n_seeds}; {:?}", t0.elapsed());
}
