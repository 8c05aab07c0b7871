//! End-to-end CLI checks: exit statuses, output schemas (golden headers),
//! determinism across reruns and job counts, and seed separation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffcbed"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("diffcbed-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{
  "d": 3, "batch_size": 2, "t_batches": 2, "n_initial_obs": 5,
  "estimator": "iwnmc", "posterior": {"kind": "none"}, "l_particles": 16,
  "policy_mode": "multi_unconstrained", "steps": 3, "samples_per_step": 2,
  "eval": {"n_designs": 2, "n_per_design": 15, "max_particles": 4},
  "seed": 3, "scm_seed": 1
}"#;

#[test]
fn missing_config_exits_with_usage_status() {
    let dir = tmp("missing");
    let out = bin()
        .args(["sample", "--config", "/nonexistent/zzz.json", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_flag_exits_with_usage_status() {
    let out = bin().args(["loop", "--definitely-not-a-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_writes_scm_and_samples() {
    let dir = tmp("sample");
    let config = write_config(&dir, SMALL);
    let out = bin().args(["sample", "--config"]).arg(&config).arg("--out").arg(&dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("scm.json").exists());
    assert!(dir.join("config.json").exists());
    let samples = fs::read_to_string(dir.join("samples.csv")).unwrap();
    assert!(samples.starts_with("targets,states,x_0,x_1,x_2\n"), "golden header changed");
}

#[test]
fn seed_override_changes_samples_but_not_scm() {
    let dir_a = tmp("seedsep-a");
    let dir_b = tmp("seedsep-b");
    let config = write_config(&dir_a, SMALL);
    for (dir, seed) in [(&dir_a, "3"), (&dir_b, "4")] {
        let out = bin()
            .args(["sample", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir)
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let scm_a = fs::read_to_string(dir_a.join("scm.json")).unwrap();
    let scm_b = fs::read_to_string(dir_b.join("scm.json")).unwrap();
    assert_eq!(scm_a, scm_b, "scm must depend only on scm_seed");
    let s_a = fs::read_to_string(dir_a.join("samples.csv")).unwrap();
    let s_b = fs::read_to_string(dir_b.join("samples.csv")).unwrap();
    assert_ne!(s_a, s_b, "samples must follow the run seed");
}

#[test]
fn loop_run_directory_has_stable_schema() {
    let dir = tmp("loop");
    let config = write_config(&dir, SMALL);
    let out = bin().args(["loop", "--config"]).arg(&config).arg("--out").arg(&dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("batch_index,e_shd,f1,i_mmd,ess,seed\n"), "golden header changed");
    assert_eq!(metrics.lines().count(), 1 + 3); // header + T+1 rows
    let trace = fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    let first = trace.lines().next().unwrap();
    for key in ["\"step\":", "\"eig_value\":", "\"temperature\":", "\"ess\":", "\"grad_norm\":"] {
        assert!(first.contains(key), "trace line lost {key}: {first}");
    }
    let designs = fs::read_to_string(dir.join("designs.jsonl")).unwrap();
    assert!(designs.lines().next().unwrap().contains("\"batch_index\":1"));
    assert!(dir.join("particles_final.json").exists());
}

#[test]
fn identical_runs_are_byte_identical_and_jobs_invariant() {
    let base = tmp("determinism");
    let config = write_config(&base, SMALL);
    let run = |name: &str, jobs: &str| -> (String, String) {
        let out_dir = base.join(name);
        let out = bin()
            .args(["loop", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .args(["--seeds", "11,12,13", "--jobs", jobs])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let m = fs::read_to_string(out_dir.join("seed-12").join("metrics.csv")).unwrap();
        let agg = fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
        (m, agg)
    };
    let (m1, a1) = run("j1", "1");
    let (m2, a2) = run("j2", "2");
    let (m3, a3) = run("j3", "3");
    assert_eq!(m1, m2);
    assert_eq!(m1, m3);
    assert_eq!(a1, a2);
    assert_eq!(a1, a3);
    assert!(a1.starts_with(
        "batch_index,n_seeds,e_shd_mean,e_shd_ci95,f1_mean,f1_ci95,i_mmd_mean,i_mmd_ci95\n"
    ));
}

#[test]
fn strategies_share_run_schema() {
    let base = tmp("strategies");
    let config = write_config(&base, SMALL);
    let mut headers = Vec::new();
    for strategy in ["policy", "random_fixed", "random_random"] {
        let out_dir = base.join(strategy);
        let out = bin()
            .args(["loop", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .args(["--strategy", strategy])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        headers.push(metrics.lines().next().unwrap().to_string());
        for name in ["config.json", "trace.jsonl", "designs.jsonl", "particles_final.json"] {
            assert!(out_dir.join(name).exists(), "{strategy}: missing {name}");
        }
    }
    assert!(headers.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn eig_grid_emits_plot_ready_csv() {
    let base = tmp("grid");
    let config = write_config(
        &base,
        r#"{
          "d": 2, "batch_size": 2, "n_initial_obs": 10,
          "estimator": "nmc", "posterior": {"kind": "exact", "m_per_graph": 100, "d_max": 4},
          "policy_mode": "single", "seed": 5, "scm_seed": 2,
          "grid": {"state_lo": -20, "state_hi": 20, "steps": 3, "n_outer": 50, "l": 16}
        }"#,
    );
    let out = bin().args(["eig-grid", "--config"]).arg(&config).arg("--out").arg(&base).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = fs::read_to_string(base.join("grid.csv")).unwrap();
    assert!(grid.starts_with("target_spec,state_1,state_2,eig_nats\n"), "golden header changed");
    // 4 target pairs x 3 x 3 states
    assert_eq!(grid.lines().count(), 1 + 4 * 9);
    // rerun determinism
    let out2 = bin()
        .args(["eig-grid", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(base.join("again"))
        .output()
        .unwrap();
    assert!(out2.status.success());
    let grid2 = fs::read_to_string(base.join("again").join("grid.csv")).unwrap();
    assert_eq!(grid, grid2);
}

#[test]
fn eig_grid_rejects_large_dimension() {
    let base = tmp("grid-too-big");
    let config = write_config(
        &base,
        r#"{
          "d": 6, "batch_size": 1, "n_initial_obs": 5,
          "estimator": "nmc", "posterior": {"kind": "exact", "m_per_graph": 10, "d_max": 4},
          "policy_mode": "single", "grid": {"steps": 3, "n_outer": 10, "l": 4}
        }"#,
    );
    let out = bin().args(["eig-grid", "--config"]).arg(&config).arg("--out").arg(&base).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_scores_particles_against_truth() {
    let base = tmp("evaluate");
    let config = write_config(&base, SMALL);
    let run_dir = base.join("run");
    let out = bin().args(["loop", "--config"]).arg(&config).arg("--out").arg(&run_dir).output().unwrap();
    assert!(out.status.success());
    let sample_dir = base.join("sample");
    let out = bin().args(["sample", "--config"]).arg(&config).arg("--out").arg(&sample_dir).output().unwrap();
    assert!(out.status.success());
    let eval_dir = base.join("eval");
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&eval_dir)
        .arg("--particles")
        .arg(run_dir.join("particles_final.json"))
        .arg("--truth")
        .arg(sample_dir.join("scm.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("batch_index,e_shd,f1,i_mmd,ess,seed\n"));
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn env_var_provides_output_directory() {
    let base = tmp("envvar");
    let config = write_config(&base, SMALL);
    let out_dir = base.join("from-env");
    let out = bin()
        .args(["sample", "--config"])
        .arg(&config)
        .env("DIFFCBED_OUT", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("scm.json").exists());
}
