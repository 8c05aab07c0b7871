//! Random environments and prior particle sets.
//!
//! Graphs are drawn by sampling a uniformly random topological order and then
//! including each order-respecting pair independently; mechanisms and noise
//! setups are drawn per node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::ParticleSet;
use crate::rng::{self, RngStream};
use crate::scm::{Dag, Scm};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// How per-node noise variances are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NoiseSpec {
    /// Every node uses the same fixed variance.
    Fixed(f64),
    /// Variance = max(x^2, floor) with x standard normal, resampled per node
    /// per particle. The floor keeps variances strictly positive.
    SquaredNormal { floor: f64 },
}

impl NoiseSpec {
    pub fn squared_normal() -> Self {
        NoiseSpec::SquaredNormal { floor: 1e-2 }
    }
}

/// Edge density, given either as a per-pair probability or as an expected
/// number of edges per vertex (converted to probability at sampling time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum EdgeDensity {
    Probability(f64),
    ExpectedEdgesPerVertex(f64),
}

/// Prior over linear-Gaussian SCMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub d: usize,
    pub edges: EdgeDensity,
    pub weight_mean: f64,
    pub weight_var: f64,
    pub noise: NoiseSpec,
}

impl PriorSpec {
    /// Particle prior: per-pair edge probability 0.25, standard normal
    /// weights, unit noise.
    pub fn particle_default(d: usize) -> Self {
        PriorSpec {
            d,
            edges: EdgeDensity::Probability(0.25),
            weight_mean: 0.0,
            weight_var: 1.0,
            noise: NoiseSpec::Fixed(1.0),
        }
    }

    /// Ground-truth environment prior: one expected edge per vertex.
    pub fn environment_default(d: usize) -> Self {
        PriorSpec {
            d,
            edges: EdgeDensity::ExpectedEdgesPerVertex(1.0),
            weight_mean: 0.0,
            weight_var: 1.0,
            noise: NoiseSpec::Fixed(1.0),
        }
    }

    /// Per-pair edge probability derived from the density setting.
    pub fn edge_probability(&self) -> Result<f64> {
        let p = match self.edges {
            EdgeDensity::Probability(p) => p,
            EdgeDensity::ExpectedEdgesPerVertex(rate) => {
                if self.d < 2 {
                    0.0
                } else {
                    rate / (self.d as f64 - 1.0)
                }
            }
        };
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::Config(format!("derived edge probability {p} outside [0,1]")));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        self.edge_probability()?;
        if !(self.weight_var >= 0.0) {
            return Err(Error::Config("weight_var must be nonnegative".into()));
        }
        match self.noise {
            NoiseSpec::Fixed(v) if !(v > 0.0) => {
                Err(Error::Config("fixed noise variance must be positive".into()))
            }
            NoiseSpec::SquaredNormal { floor } if !(floor > 0.0) => {
                Err(Error::Config("noise floor must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Uniform random order, then each order-respecting pair becomes an edge
/// independently with the derived probability.
pub fn sample_dag(spec: &PriorSpec, rng: &mut RngStream) -> Result<Dag> {
    spec.validate()?;
    let p = spec.edge_probability()?;
    let d = spec.d;
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for a in 0..d {
        for b in (a + 1)..d {
            if rng.random::<f64>() < p {
                edges.push((order[a], order[b]));
            }
        }
    }
    Dag::new(d, edges)
}

/// Draws weights for each edge and noise variances per the spec.
pub fn sample_parameters(dag: &Dag, spec: &PriorSpec, rng: &mut RngStream) -> Result<Scm> {
    let d = dag.d();
    let mut weights = vec![vec![0.0; d]; d];
    let sd = spec.weight_var.sqrt();
    for &(i, j) in dag.edges() {
        let z: f64 = rng.sample(StandardNormal);
        weights[i][j] = spec.weight_mean + sd * z;
    }
    let noise_vars: Vec<f64> = (0..d)
        .map(|_| match spec.noise {
            NoiseSpec::Fixed(v) => v,
            NoiseSpec::SquaredNormal { floor } => {
                let x: f64 = rng.sample(StandardNormal);
                (x * x).max(floor)
            }
        })
        .collect();
    Scm::new(dag.clone(), weights, noise_vars)
}

/// One prior draw of a full SCM.
pub fn sample_scm(spec: &PriorSpec, rng: &mut RngStream) -> Result<Scm> {
    let dag = sample_dag(spec, rng)?;
    sample_parameters(&dag, spec, rng)
}

/// `L` independent prior draws with uniform weights and no history attached.
/// Each particle uses its own pre-split substream, so the set is identical
/// however the draws are scheduled.
pub fn sample_particles(spec: &PriorSpec, l: usize, rng: &mut RngStream) -> Result<ParticleSet> {
    if l < 2 {
        return Err(Error::Config("particle count must be >= 2".into()));
    }
    let seeds = rng::child_seeds(rng, l);
    let particles = seeds
        .into_iter()
        .map(|s| sample_scm(spec, &mut rng::stream(s)))
        .collect::<Result<Vec<_>>>()?;
    ParticleSet::uniform(particles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_probability_gives_empty_graph() {
        let mut spec = PriorSpec::particle_default(4);
        spec.edges = EdgeDensity::Probability(0.0);
        let mut rng = stream(1);
        for _ in 0..20 {
            assert_eq!(sample_dag(&spec, &mut rng).unwrap().n_edges(), 0);
        }
    }

    #[test]
    fn unit_probability_gives_complete_dag() {
        let mut spec = PriorSpec::particle_default(3);
        spec.edges = EdgeDensity::Probability(1.0);
        let mut rng = stream(2);
        for _ in 0..20 {
            assert_eq!(sample_dag(&spec, &mut rng).unwrap().n_edges(), 3);
        }
    }

    #[test]
    fn mean_edge_count_matches_binomial() {
        // p = 0.25 over C(5,2) = 10 pairs: mean 2.5, sd of the mean over
        // 10^4 draws = sqrt(10 * 0.25 * 0.75 / 1e4) ~ 0.0137.
        let spec = PriorSpec::particle_default(5);
        let mut rng = stream(3);
        let n = 10_000;
        let total: usize = (0..n).map(|_| sample_dag(&spec, &mut rng).unwrap().n_edges()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 2.5).abs() < 3.0 * 0.0137, "mean {mean}");
    }

    #[test]
    fn rate_form_matches_probability_form() {
        let spec = PriorSpec::environment_default(5);
        assert_eq!(spec.edge_probability().unwrap(), 0.25);
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let mut spec = PriorSpec::particle_default(3);
        spec.edges = EdgeDensity::ExpectedEdgesPerVertex(5.0);
        assert!(spec.edge_probability().is_err());
    }

    #[test]
    fn empty_graph_has_zero_weights() {
        let spec = PriorSpec::particle_default(3);
        let dag = Dag::new(3, vec![]).unwrap();
        let scm = sample_parameters(&dag, &spec, &mut stream(4)).unwrap();
        assert!(scm.weights().iter().all(|row| row.iter().all(|&w| w == 0.0)));
    }

    #[test]
    fn zero_weight_variance_pins_weights_to_mean() {
        let mut spec = PriorSpec::particle_default(2);
        spec.weight_mean = 1.5;
        spec.weight_var = 0.0;
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let scm = sample_parameters(&dag, &spec, &mut stream(5)).unwrap();
        assert_eq!(scm.weights()[0][1], 1.5);
    }

    #[test]
    fn weight_moments_match_prior() {
        let spec = PriorSpec::particle_default(2);
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let mut rng = stream(6);
        let n = 10_000;
        let ws: Vec<f64> =
            (0..n).map(|_| sample_parameters(&dag, &spec, &mut rng).unwrap().weights()[0][1]).collect();
        let mean = ws.iter().sum::<f64>() / n as f64;
        let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.06, "var {var}");
    }

    #[test]
    fn squared_normal_noise_respects_floor() {
        let mut spec = PriorSpec::particle_default(3);
        spec.noise = NoiseSpec::squared_normal();
        let mut rng = stream(7);
        for _ in 0..200 {
            let scm = sample_scm(&spec, &mut rng).unwrap();
            assert!(scm.noise_vars().iter().all(|&v| v >= 1e-2));
        }
    }

    #[test]
    fn particles_are_reproducible_and_distinct() {
        let spec = PriorSpec::particle_default(4);
        let a = sample_particles(&spec, 2, &mut stream(8)).unwrap();
        let b = sample_particles(&spec, 2, &mut stream(8)).unwrap();
        assert_eq!(a.particles()[0], b.particles()[0]);
        assert_eq!(a.particles()[1], b.particles()[1]);
        assert_ne!(a.particles()[0], a.particles()[1]);
        assert_eq!(a.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn exchangeable_pair_statistics() {
        // Permutation invariance of the sampling distribution: the mean of
        // f(p1) - f(p2) over many seeds is zero within Monte Carlo error.
        let spec = PriorSpec::particle_default(4);
        let n = 4000;
        let mut diffs = Vec::with_capacity(n);
        for seed in 0..n {
            let set = sample_particles(&spec, 2, &mut stream(seed as u64)).unwrap();
            let f = |s: &Scm| s.dag().n_edges() as f64;
            diffs.push(f(&set.particles()[0]) - f(&set.particles()[1]));
        }
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se.max(1e-3), "mean {mean}, se {se}");
    }
}
