//! Recovery metrics: structural Hamming distance, directed-edge F1 and the
//! interventional MMD distance between true and modeled distributions.

use serde::Serialize;

use crate::posterior::{draw_weighted_index, ParticleSet};
use crate::rng::{self, RngStream};
use crate::scm::{sample, Dag, Design, Scm};
use rand::Rng;

/// Structural Hamming distance with the reversal-counts-one convention:
/// the number of unordered pairs whose edge pattern (none / forward /
/// backward) differs between the graphs.
pub fn shd(g1: &Dag, g2: &Dag) -> usize {
    assert_eq!(g1.d(), g2.d(), "graphs must share the vertex count");
    let d = g1.d();
    let mut count = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let p1 = (g1.has_edge(i, j), g1.has_edge(j, i));
            let p2 = (g2.has_edge(i, j), g2.has_edge(j, i));
            if p1 != p2 {
                count += 1;
            }
        }
    }
    count
}

/// Weight-weighted mean SHD between particle graphs and the truth.
pub fn expected_shd(particles: &ParticleSet, truth: &Dag) -> f64 {
    particles
        .particles()
        .iter()
        .zip(particles.weights())
        .map(|(scm, w)| w * shd(scm.dag(), truth) as f64)
        .sum()
}

fn f1_for(g: &Dag, truth: &Dag) -> f64 {
    let d = truth.d();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            match (g.has_edge(i, j), truth.has_edge(i, j)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0 // empty prediction of an empty truth is perfect
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Weighted mean F1 of directed-edge prediction against the truth.
pub fn edge_f1(particles: &ParticleSet, truth: &Dag) -> f64 {
    particles
        .particles()
        .iter()
        .zip(particles.weights())
        .map(|(scm, w)| w * f1_for(scm.dag(), truth))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdDetail {
    pub value: f64,
    pub bandwidth: f64,
    /// Set when every pooled pairwise distance was zero and the bandwidth
    /// fell back to 1.
    pub degenerate_bandwidth: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel; the bandwidth is
/// the median of nonzero pooled pairwise distances (fallback 1.0).
pub fn mmd_squared_detail(x: &[Vec<f64>], y: &[Vec<f64>]) -> MmdDetail {
    assert!(!x.is_empty() && !y.is_empty(), "both samples must be nonempty");
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            let d2 = sq_dist(pooled[i], pooled[j]);
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    let (bandwidth, degenerate) = if dists.is_empty() {
        (1.0, true)
    } else {
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = dists.len();
        let med = if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) };
        (med, false)
    };
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel_mean = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for ra in a {
            for rb in b {
                acc += (-gamma * sq_dist(ra, rb)).exp();
            }
        }
        acc / (a.len() as f64 * b.len() as f64)
    };
    let value = kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y);
    MmdDetail { value: value.max(0.0), bandwidth, degenerate_bandwidth: degenerate }
}

pub fn mmd_squared(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    mmd_squared_detail(x, y).value
}

/// Evaluation design distribution for the interventional MMD: single
/// uniformly chosen target, state uniform in the configured range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IMmdConfig {
    pub n_designs: usize,
    pub state_lo: f64,
    pub state_hi: f64,
    /// When positive and fewer than the particle count, this many particles
    /// are resampled by weight for the evaluation.
    pub max_particles: usize,
}

impl Default for IMmdConfig {
    fn default() -> Self {
        IMmdConfig { n_designs: 10, state_lo: -10.0, state_hi: 10.0, max_particles: 0 }
    }
}

/// Mean (over random designs and weighted particles) of the root MMD between
/// the true and particle interventional distributions.
pub fn i_mmd(
    particles: &ParticleSet,
    truth: &Scm,
    cfg: &IMmdConfig,
    n_per_design: usize,
    rng: &mut RngStream,
) -> f64 {
    assert!(n_per_design >= 2, "need at least two samples per design");
    let d = truth.d();
    // particle selection: all (weighted) or a weighted resample
    let use_resample = cfg.max_particles > 0 && particles.len() > cfg.max_particles;
    let (indices, weights): (Vec<usize>, Vec<f64>) = if use_resample {
        let cum = particles.cumulative_weights();
        let idx: Vec<usize> =
            (0..cfg.max_particles).map(|_| draw_weighted_index(&cum, rng)).collect();
        let w = 1.0 / cfg.max_particles as f64;
        let ws = vec![w; cfg.max_particles];
        (idx, ws)
    } else {
        ((0..particles.len()).collect(), particles.weights().to_vec())
    };

    let mut total = 0.0;
    for _ in 0..cfg.n_designs {
        let target = rng.random_range(0..d);
        let state = cfg.state_lo + (cfg.state_hi - cfg.state_lo) * rng.random::<f64>();
        let design = Design::new(vec![target], vec![state]).expect("valid eval design");
        let mut truth_rng = rng::child(rng);
        let x = sample(truth, &design, n_per_design, &mut truth_rng).expect("truth sampling");
        let mut per_design = 0.0;
        for (&idx, &w) in indices.iter().zip(&weights) {
            let mut p_rng = rng::child(rng);
            let y = sample(&particles.particles()[idx], &design, n_per_design, &mut p_rng)
                .expect("particle sampling");
            per_design += w * mmd_squared(&x.values, &y.values).sqrt();
        }
        total += per_design;
    }
    total / cfg.n_designs as f64
}

/// Full metric report for one posterior snapshot against the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub e_shd: f64,
    pub f1: f64,
    pub i_mmd: f64,
    pub per_particle_shd: Vec<f64>,
    pub per_particle_f1: Vec<f64>,
}

pub fn evaluate(
    particles: &ParticleSet,
    truth: &Scm,
    cfg: &IMmdConfig,
    n_per_design: usize,
    rng: &mut RngStream,
) -> MetricReport {
    let per_particle_shd: Vec<f64> =
        particles.particles().iter().map(|s| shd(s.dag(), truth.dag()) as f64).collect();
    let per_particle_f1: Vec<f64> =
        particles.particles().iter().map(|s| f1_for(s.dag(), truth.dag())).collect();
    MetricReport {
        e_shd: expected_shd(particles, truth.dag()),
        f1: edge_f1(particles, truth.dag()),
        i_mmd: i_mmd(particles, truth, cfg, n_per_design, rng),
        per_particle_shd,
        per_particle_f1,
    }
}
