//! Particle representations of beliefs over SCMs.
//!
//! Three routes produce weighted particle sets: reweighting an existing set
//! by history likelihoods (self-normalized importance sampling), exact
//! enumeration of all DAGs at small dimension with importance-sampled
//! parameters, and a bootstrap ensemble fitted by the structure learner.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::{self, LearnConfig, Record};
use crate::math::{logsumexp, softmax};
use crate::prior::{sample_parameters, PriorSpec};
use crate::rng::{self, RngStream};
use crate::scm::{log_likelihood, Dag, Design, Scm};
use rand::Rng;

/// Experimental history: (design, outcome) records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset { records: Vec::new() }
    }

    pub fn from_records(records: Vec<Record>) -> Self {
        Dataset { records }
    }

    pub fn push(&mut self, design: Design, outcome: Vec<f64>) {
        self.records.push((design, outcome));
    }

    pub fn extend(&mut self, records: Vec<Record>) {
        self.records.extend(records);
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn observational(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|(d, _)| d.is_observational())
    }

    pub fn interventional(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|(d, _)| !d.is_observational())
    }
}

/// A weighted set of SCM particles, optionally carrying per-particle history
/// log-likelihoods `log p(h | theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParticleSetRepr", into = "ParticleSetRepr")]
pub struct ParticleSet {
    particles: Vec<Scm>,
    weights: Vec<f64>,
    log_hist_lik: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone)]
struct ParticleSetRepr {
    particles: Vec<Scm>,
    weights: Vec<f64>,
    log_hist_lik: Option<Vec<f64>>,
}

impl TryFrom<ParticleSetRepr> for ParticleSet {
    type Error = Error;
    fn try_from(r: ParticleSetRepr) -> Result<Self> {
        let set = ParticleSet::weighted(r.particles, r.weights)?;
        match r.log_hist_lik {
            None => Ok(set),
            Some(lh) => set.with_log_hist_lik(lh),
        }
    }
}

impl From<ParticleSet> for ParticleSetRepr {
    fn from(p: ParticleSet) -> Self {
        ParticleSetRepr { particles: p.particles, weights: p.weights, log_hist_lik: p.log_hist_lik }
    }
}

impl ParticleSet {
    pub fn uniform(particles: Vec<Scm>) -> Result<Self> {
        let l = particles.len();
        if l == 0 {
            return Err(Error::Config("particle set must be nonempty".into()));
        }
        let w = 1.0 / l as f64;
        Ok(ParticleSet { particles, weights: vec![w; l], log_hist_lik: None })
    }

    pub fn weighted(particles: Vec<Scm>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("particle set must be nonempty".into()));
        }
        if particles.len() != weights.len() {
            return Err(Error::Dimension("one weight per particle".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite("particle weights".into()));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Config("particle weights must have positive mass".into()));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(ParticleSet { particles, weights, log_hist_lik: None })
    }

    pub fn with_log_hist_lik(mut self, log_hist_lik: Vec<f64>) -> Result<Self> {
        if log_hist_lik.len() != self.particles.len() {
            return Err(Error::Dimension("one history log-likelihood per particle".into()));
        }
        self.log_hist_lik = Some(log_hist_lik);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Scm] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_hist_lik(&self) -> Option<&[f64]> {
        self.log_hist_lik.as_deref()
    }

    pub fn d(&self) -> usize {
        self.particles[0].d()
    }

    /// Cumulative weights for inverse-CDF resampling.
    pub fn cumulative_weights(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut cum = Vec::with_capacity(self.weights.len());
        for &w in &self.weights {
            acc += w;
            cum.push(acc);
        }
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        cum
    }
}

/// One weighted draw by inverse CDF over precomputed cumulative weights.
pub fn draw_weighted_index(cum: &[f64], rng: &mut RngStream) -> usize {
    let u: f64 = rng.random();
    cum.partition_point(|&c| c < u).min(cum.len() - 1)
}

/// Attaches history log-likelihoods to every particle and reweights by
/// self-normalized importance sampling: `w_m = softmax(log p(h | theta_m))`.
pub fn attach_history(particles: &ParticleSet, data: &Dataset) -> ParticleSet {
    let log_hist: Vec<f64> = particles
        .particles()
        .iter()
        .map(|scm| data.records().iter().map(|(design, y)| log_likelihood(scm, y, design)).sum())
        .collect();
    let weights = softmax(&log_hist);
    ParticleSet {
        particles: particles.particles.clone(),
        weights,
        log_hist_lik: Some(log_hist),
    }
}

/// `1 / sum(w^2)`: the number of effectively independent particles, in
/// `[1, L]`. Exactly uniform weights short-circuit to `L` so the identity
/// holds without rounding.
pub fn effective_sample_size(particles: &ParticleSet) -> f64 {
    let w = particles.weights();
    if w.windows(2).all(|p| p[0] == p[1]) {
        return w.len() as f64;
    }
    let s: f64 = w.iter().map(|w| w * w).sum();
    1.0 / s
}

/// All DAGs on `d` labeled vertices.
pub fn enumerate_dags(d: usize) -> Vec<Dag> {
    assert!(d <= 5, "enumeration is exponential; only d <= 5 is supported");
    let pairs: Vec<(usize, usize)> =
        (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let mut dags = Vec::new();
    for mask in 0u64..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> =
            pairs.iter().enumerate().filter(|&(k, _)| mask & (1 << k) != 0).map(|(_, &e)| e).collect();
        if let Ok(dag) = Dag::new(d, edges) {
            dags.push(dag);
        }
    }
    dags
}

/// Number of topological orders of the DAG (linear extensions), by subset DP.
fn linear_extension_count(dag: &Dag) -> u64 {
    let d = dag.d();
    let mut parent_mask = vec![0u64; d];
    for &(i, j) in dag.edges() {
        parent_mask[j] |= 1 << i;
    }
    let full = (1u64 << d) - 1;
    let mut ways = vec![0u64; 1 << d];
    ways[0] = 1;
    for mask in 1..=full {
        let mut acc = 0;
        for v in 0..d {
            let bit = 1u64 << v;
            if mask & bit != 0 && parent_mask[v] & (mask & !bit) == parent_mask[v] {
                acc += ways[(mask & !bit) as usize];
            }
        }
        ways[mask as usize] = acc;
    }
    ways[full as usize]
}

/// Log-prior of a graph under the generative prior (uniform order, then
/// independent order-respecting edges), marginalized exactly over orders.
pub fn log_graph_prior(dag: &Dag, edge_prob: f64) -> f64 {
    let d = dag.d();
    let n_pairs = d * (d - 1) / 2;
    let e = dag.n_edges();
    let mut lp = 0.0;
    if e > 0 {
        if edge_prob == 0.0 {
            return f64::NEG_INFINITY;
        }
        lp += e as f64 * edge_prob.ln();
    }
    let absent = n_pairs - e;
    if absent > 0 {
        if edge_prob == 1.0 {
            return f64::NEG_INFINITY;
        }
        lp += absent as f64 * (1.0 - edge_prob).ln();
    }
    let ext = linear_extension_count(dag) as f64;
    let dfact: f64 = (1..=d).map(|k| k as f64).product();
    lp + (ext / dfact).ln()
}

/// Exact-enumeration posterior at small dimension: every DAG is enumerated,
/// each receives `m_per_graph` parameter particles from the prior, and the
/// self-normalized weight of a particle is proportional to
/// `prior(graph) * p(data | theta)`.
pub fn exact_posterior(
    data: &Dataset,
    spec: &PriorSpec,
    d_max: usize,
    m_per_graph: usize,
    rng: &mut RngStream,
) -> Result<ParticleSet> {
    spec.validate()?;
    if spec.d > d_max {
        return Err(Error::Capability(format!(
            "exact posterior enumerates all DAGs; d={} exceeds d_max={d_max}",
            spec.d
        )));
    }
    if m_per_graph == 0 {
        return Err(Error::Config("m_per_graph must be >= 1".into()));
    }
    let p = spec.edge_probability()?;
    let dags = enumerate_dags(spec.d);
    let mut particles = Vec::with_capacity(dags.len() * m_per_graph);
    let mut log_w = Vec::with_capacity(dags.len() * m_per_graph);
    for dag in &dags {
        let lp_graph = log_graph_prior(dag, p);
        if lp_graph == f64::NEG_INFINITY {
            continue;
        }
        let seeds = rng::child_seeds(rng, m_per_graph);
        for seed in seeds {
            let scm = sample_parameters(dag, spec, &mut rng::stream(seed))?;
            let ll: f64 =
                data.records().iter().map(|(design, y)| log_likelihood(&scm, y, design)).sum();
            log_w.push(lp_graph + ll);
            particles.push(scm);
        }
    }
    let weights = softmax(&log_w);
    ParticleSet::weighted(particles, weights)
}

/// Bootstrap-ensemble posterior: each replicate resamples records with
/// replacement within each intervention regime, learns a structure and fits
/// maximum-likelihood parameters. Replicates carry uniform weights.
pub fn bootstrap_posterior(
    data: &Dataset,
    k: usize,
    cfg: &LearnConfig,
    rng: &mut RngStream,
) -> Result<ParticleSet> {
    if data.is_empty() {
        return Err(Error::Config("bootstrap requires a nonempty dataset".into()));
    }
    if k == 0 {
        return Err(Error::Config("bootstrap count must be >= 1".into()));
    }
    let d = data.records()[0].1.len();
    // stratify by regime: identical designs resample among themselves
    let mut strata: HashMap<String, Vec<usize>> = HashMap::new();
    for (idx, (design, _)) in data.records().iter().enumerate() {
        let key = serde_json::to_string(design).expect("design serializes");
        strata.entry(key).or_default().push(idx);
    }
    let mut stratum_order: Vec<&Vec<usize>> = strata.values().collect();
    stratum_order.sort_by_key(|v| v[0]);

    let seeds = rng::child_seeds(rng, k);
    let mut particles = Vec::with_capacity(k);
    for seed in seeds {
        let mut sub = rng::stream(seed);
        let mut resample = Vec::with_capacity(data.len());
        for stratum in &stratum_order {
            for _ in 0..stratum.len() {
                let pick = stratum[sub.random_range(0..stratum.len())];
                resample.push(data.records()[pick].clone());
            }
        }
        let dag = learn::learn_structure(d, &resample, cfg, &mut sub)?;
        particles.push(learn::fit_mle(&dag, &resample, cfg)?);
    }
    ParticleSet::uniform(particles)
}

/// Log-marginal-likelihood based weights diagnostic: log of the average
/// history likelihood across particles (used to monitor weight collapse).
pub fn log_mean_history_likelihood(particles: &ParticleSet) -> Option<f64> {
    particles
        .log_hist_lik()
        .map(|lh| logsumexp(lh) - (lh.len() as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::scm::sample;

    fn chain2(w: f64) -> Scm {
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let mut weights = vec![vec![0.0; 2]; 2];
        weights[0][1] = w;
        Scm::new(dag, weights, vec![1.0, 1.0]).unwrap()
    }

    fn obs_dataset(scm: &Scm, n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed);
        let m = sample(scm, &Design::observational(), n, &mut rng).unwrap();
        Dataset::from_records(
            m.values.into_iter().map(|y| (Design::observational(), y)).collect(),
        )
    }

    #[test]
    fn empty_dataset_gives_uniform_weights_and_full_ess() {
        let spec = PriorSpec::particle_default(3);
        let set = crate::prior::sample_particles(&spec, 10, &mut stream(1)).unwrap();
        let re = attach_history(&set, &Dataset::new());
        assert!(re.weights().iter().all(|&w| (w - 0.1).abs() < 1e-15));
        assert_eq!(effective_sample_size(&re), 10.0);
        assert!(re.log_hist_lik().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dominant_particle_takes_all_weight() {
        let good = chain2(1.0);
        let bad = {
            let dag = Dag::new(2, vec![]).unwrap();
            Scm::new(dag, vec![vec![0.0; 2]; 2], vec![1e-4, 1e-4]).unwrap()
        };
        let set = ParticleSet::uniform(vec![good, bad]).unwrap();
        let mut data = Dataset::new();
        data.push(Design::observational(), vec![2.0, 2.0]);
        let re = attach_history(&set, &data);
        assert!(re.weights()[0] > 0.999, "weights {:?}", re.weights());
    }

    #[test]
    fn history_weights_match_term_by_term_oracle() {
        let set = ParticleSet::uniform(vec![chain2(0.5), chain2(-1.0), chain2(2.0)]).unwrap();
        let mut data = Dataset::new();
        data.push(Design::observational(), vec![0.3, 0.9]);
        data.push(Design::new(vec![0], vec![1.0]).unwrap(), vec![1.0, 0.2]);
        let re = attach_history(&set, &data);
        // oracle: per-particle product of Gaussian factors computed directly
        let dens = |w: f64, y: &[f64], skip0: bool| -> f64 {
            let f0 = if skip0 {
                1.0
            } else {
                (-0.5 * y[0] * y[0]).exp() / (2.0 * std::f64::consts::PI).sqrt()
            };
            let r = y[1] - w * y[0];
            let f1 = (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt();
            f0 * f1
        };
        let ws = [0.5, -1.0, 2.0];
        let raw: Vec<f64> = ws
            .iter()
            .map(|&w| dens(w, &[0.3, 0.9], false) * dens(w, &[1.0, 0.2], true))
            .collect();
        let total: f64 = raw.iter().sum();
        for (got, expect) in re.weights().iter().zip(raw.iter().map(|r| r / total)) {
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn ess_formula_cases() {
        let spec = PriorSpec::particle_default(2);
        let particles = crate::prior::sample_particles(&spec, 3, &mut stream(2)).unwrap();
        let one_hot =
            ParticleSet::weighted(particles.particles().to_vec(), vec![1.0, 0.0, 0.0]).unwrap();
        assert!((effective_sample_size(&one_hot) - 1.0).abs() < 1e-12);
        let mixed =
            ParticleSet::weighted(particles.particles().to_vec(), vec![0.5, 0.25, 0.25]).unwrap();
        assert!((effective_sample_size(&mixed) - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dag_enumeration_counts() {
        assert_eq!(enumerate_dags(2).len(), 3);
        assert_eq!(enumerate_dags(3).len(), 25);
        assert_eq!(enumerate_dags(4).len(), 543);
    }

    #[test]
    fn graph_prior_sums_to_one() {
        for d in 2..=4 {
            let total: f64 =
                enumerate_dags(d).iter().map(|g| log_graph_prior(g, 0.25).exp()).sum();
            assert!((total - 1.0).abs() < 1e-10, "d={d}: {total}");
        }
    }

    #[test]
    fn no_data_posterior_matches_graph_prior() {
        let spec = PriorSpec::particle_default(2);
        let set = exact_posterior(&Dataset::new(), &spec, 4, 200, &mut stream(3)).unwrap();
        // mass per graph = sum of that graph's particle weights
        let mut mass = HashMap::new();
        for (scm, w) in set.particles().iter().zip(set.weights()) {
            *mass.entry(scm.dag().edges().to_vec()).or_insert(0.0) += w;
        }
        assert!((mass[&vec![]] - 0.75).abs() < 1e-10);
        assert!((mass[&vec![(0, 1)]] - 0.125).abs() < 1e-10);
        assert!((mass[&vec![(1, 0)]] - 0.125).abs() < 1e-10);
    }

    /// Closed-form marginal likelihoods for the three 2-node graphs under
    /// fixed unit noise and a standard normal weight prior.
    fn closed_form_edge_probability(records: &[(Design, Vec<f64>)]) -> f64 {
        let (mut s00, mut s11, mut s01, mut n) = (0.0, 0.0, 0.0, 0.0);
        for (_, y) in records {
            s00 += y[0] * y[0];
            s11 += y[1] * y[1];
            s01 += y[0] * y[1];
            n += 1.0;
        }
        let half_ln_2pi = 0.5 * crate::math::LN_2PI;
        // empty graph: all factors standard normal
        let m_empty = -n * half_ln_2pi - 0.5 * s00 - n * half_ln_2pi - 0.5 * s11;
        // chain 0 -> 1: integrate the regression weight out analytically
        let chain = |sx: f64, sy: f64, sxy: f64| -> f64 {
            let a = 1.0 + sx;
            -n * half_ln_2pi - 0.5 * (sy - sxy * sxy / a) - 0.5 * a.ln()
        };
        let m01 = -n * half_ln_2pi - 0.5 * s00 + chain(s00, s11, s01);
        let m10 = -n * half_ln_2pi - 0.5 * s11 + chain(s11, s00, s01);
        let (p_e, p_c) = (0.75f64, 0.125f64);
        let log_terms =
            [p_e.ln() + m_empty, p_c.ln() + m01, p_c.ln() + m10];
        let z = logsumexp(&log_terms);
        ((log_terms[1] - z).exp()) + ((log_terms[2] - z).exp())
    }

    #[test]
    fn strong_chain_data_concentrates_on_the_edge() {
        let scm = chain2(2.0);
        let data = obs_dataset(&scm, 200, 21);
        let spec = PriorSpec::particle_default(2);
        let set = exact_posterior(&data, &spec, 4, 500, &mut stream(4)).unwrap();
        let edge_mass: f64 = set
            .particles()
            .iter()
            .zip(set.weights())
            .filter(|(s, _)| s.dag().n_edges() == 1)
            .map(|(_, w)| w)
            .sum();
        assert!(edge_mass > 0.9, "edge mass {edge_mass}");
        let oracle = closed_form_edge_probability(data.records());
        assert!((edge_mass - oracle).abs() < 0.05, "{edge_mass} vs oracle {oracle}");
    }

    #[test]
    fn empty_graph_data_concentrates_on_empty_graph() {
        let dag = Dag::new(2, vec![]).unwrap();
        let truth = Scm::new(dag, vec![vec![0.0; 2]; 2], vec![1.0, 1.0]).unwrap();
        let data = obs_dataset(&truth, 200, 22);
        let spec = PriorSpec::particle_default(2);
        let set = exact_posterior(&data, &spec, 4, 500, &mut stream(5)).unwrap();
        let empty_mass: f64 = set
            .particles()
            .iter()
            .zip(set.weights())
            .filter(|(s, _)| s.dag().n_edges() == 0)
            .map(|(_, w)| w)
            .sum();
        let oracle = 1.0 - closed_form_edge_probability(data.records());
        assert!(empty_mass > 0.8, "empty mass {empty_mass}");
        assert!((empty_mass - oracle).abs() < 0.05, "{empty_mass} vs oracle {oracle}");
    }

    #[test]
    fn conjugate_convergence_at_spec_scale() {
        // M = 2000 per graph, n = 500 records, tolerance 0.02.
        let scm = chain2(0.4);
        let data = obs_dataset(&scm, 500, 23);
        let spec = PriorSpec::particle_default(2);
        let set = exact_posterior(&data, &spec, 4, 2000, &mut stream(6)).unwrap();
        let edge_mass: f64 = set
            .particles()
            .iter()
            .zip(set.weights())
            .filter(|(s, _)| s.dag().n_edges() == 1)
            .map(|(_, w)| w)
            .sum();
        let oracle = closed_form_edge_probability(data.records());
        assert!((edge_mass - oracle).abs() < 0.02, "{edge_mass} vs oracle {oracle}");
    }

    #[test]
    fn posterior_invariant_to_uninformative_records() {
        // a record intervening on every node has identical (empty) likelihood
        // under every particle and must not change weights
        let scm = chain2(1.0);
        let data = obs_dataset(&scm, 50, 24);
        let spec = PriorSpec::particle_default(2);
        let a = exact_posterior(&data, &spec, 4, 300, &mut stream(7)).unwrap();
        let mut data2 = data.clone();
        data2.push(Design::new(vec![0, 1], vec![1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        let b = exact_posterior(&data2, &spec, 4, 300, &mut stream(7)).unwrap();
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert!((wa - wb).abs() < 1e-12);
        }
    }

    #[test]
    fn exceeding_dmax_is_a_capability_error() {
        let spec = PriorSpec::particle_default(5);
        let err = exact_posterior(&Dataset::new(), &spec, 4, 10, &mut stream(8));
        assert!(matches!(err, Err(Error::Capability(_))));
    }

    #[test]
    fn bootstrap_is_reproducible_and_valid() {
        let scm = chain2(2.0);
        let data = obs_dataset(&scm, 200, 25);
        let cfg = LearnConfig::default();
        let a = bootstrap_posterior(&data, 5, &cfg, &mut stream(9)).unwrap();
        let b = bootstrap_posterior(&data, 5, &cfg, &mut stream(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.weights().iter().all(|&w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn bootstrap_single_replicate_recovers_markov_equivalent_chain() {
        let scm = chain2(2.0);
        let mut data = obs_dataset(&scm, 5000, 26);
        let mut rng = stream(27);
        let do0 = Design::new(vec![0], vec![3.0]).unwrap();
        let m = sample(&scm, &do0, 5000, &mut rng).unwrap();
        data.extend(m.values.into_iter().map(|y| (do0.clone(), y)).collect());
        let set = bootstrap_posterior(&data, 1, &LearnConfig::default(), &mut stream(28)).unwrap();
        assert_eq!(set.particles()[0].dag().edges(), &[(0, 1)]);
    }

    #[test]
    fn particle_set_roundtrip() {
        let set = ParticleSet::uniform(vec![chain2(1.0), chain2(-0.5)]).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        let back: ParticleSet = serde_json::from_str(&json).unwrap();
        assert_eq!(set, back);
    }
}
