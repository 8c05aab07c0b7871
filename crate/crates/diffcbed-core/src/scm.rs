//! Linear-Gaussian structural causal models: graphs, interventions,
//! ancestral sampling and interventional log-likelihoods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::normal_logpdf;
use crate::rng::RngStream;
use rand::Rng;
use rand_distr::StandardNormal;

/// Directed acyclic graph over `d` vertices.
///
/// Edges are ordered `(parent, child)` pairs. A topological order is computed
/// on construction; construction fails on cycles, self-loops, duplicate edges
/// or out-of-range indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagRepr", into = "DagRepr")]
pub struct Dag {
    d: usize,
    edges: Vec<(usize, usize)>,
    topo: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone)]
struct DagRepr {
    d: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<DagRepr> for Dag {
    type Error = Error;
    fn try_from(r: DagRepr) -> Result<Self> {
        Dag::new(r.d, r.edges)
    }
}

impl From<Dag> for DagRepr {
    fn from(g: Dag) -> Self {
        DagRepr { d: g.d, edges: g.edges }
    }
}

impl Dag {
    pub fn new(d: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        for &(i, j) in &edges {
            if i >= d || j >= d {
                return Err(Error::Dimension(format!("edge ({i},{j}) out of range for d={d}")));
            }
            if i == j {
                return Err(Error::Config(format!("self-loop at {i}")));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let topo = topological_order(d, &edges)?;
        Ok(Dag { d, edges, topo })
    }

    pub fn empty(d: usize) -> Self {
        Dag { d, edges: Vec::new(), topo: (0..d).collect() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.edges.binary_search(&(parent, child)).is_ok()
    }

    /// Topological order computed at construction: `order(i) < order(j)` for
    /// every edge `(i, j)`.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(_, j)| j == node).map(|&(i, _)| i).collect()
    }
}

/// Kahn's algorithm. Ties resolved by smallest vertex index, so the empty
/// graph yields the identity permutation.
pub fn topological_order(d: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut indegree = vec![0usize; d];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); d];
    for &(i, j) in edges {
        indegree[j] += 1;
        out[i].push(j);
    }
    let mut ready: Vec<usize> = (0..d).filter(|&v| indegree[v] == 0).collect();
    ready.sort_unstable_by(|a, b| b.cmp(a)); // pop() takes the smallest
    let mut order = Vec::with_capacity(d);
    while let Some(v) = ready.pop() {
        order.push(v);
        for &c in &out[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                // keep `ready` sorted descending for deterministic pops
                let pos = ready.partition_point(|&x| x > c);
                ready.insert(pos, c);
            }
        }
    }
    if order.len() != d {
        return Err(Error::Cycle);
    }
    Ok(order)
}

/// A linear-Gaussian SCM: a [`Dag`] plus edge weights and per-node noise
/// variances. `weights[i][j]` is the coefficient of parent `i` on child `j`
/// and is zero wherever there is no edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmRepr", into = "ScmRepr")]
pub struct Scm {
    dag: Dag,
    weights: Vec<Vec<f64>>,
    noise_vars: Vec<f64>,
    // caches built on construction, not serialized
    parents: Vec<Vec<(usize, f64)>>,
    inv_var: Vec<f64>,
    ln_var: Vec<f64>,
    noise_std: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct ScmRepr {
    d: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    noise_vars: Vec<f64>,
}

impl TryFrom<ScmRepr> for Scm {
    type Error = Error;
    fn try_from(r: ScmRepr) -> Result<Self> {
        let dag = Dag::new(r.d, r.edges)?;
        Scm::new(dag, r.weights, r.noise_vars)
    }
}

impl From<Scm> for ScmRepr {
    fn from(s: Scm) -> Self {
        ScmRepr {
            d: s.dag.d,
            edges: s.dag.edges.clone(),
            weights: s.weights,
            noise_vars: s.noise_vars,
        }
    }
}

impl Scm {
    pub fn new(dag: Dag, weights: Vec<Vec<f64>>, noise_vars: Vec<f64>) -> Result<Self> {
        let d = dag.d();
        if weights.len() != d || weights.iter().any(|row| row.len() != d) {
            return Err(Error::Dimension(format!("weights must be {d}x{d}")));
        }
        if noise_vars.len() != d {
            return Err(Error::Dimension(format!("noise_vars must have length {d}")));
        }
        for (i, row) in weights.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if w != 0.0 && !dag.has_edge(i, j) {
                    return Err(Error::Config(format!("nonzero weight ({i},{j}) without edge")));
                }
                if !w.is_finite() {
                    return Err(Error::NonFinite(format!("weight ({i},{j})")));
                }
            }
        }
        for (j, &v) in noise_vars.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("noise variance {j} must be positive, got {v}")));
            }
        }
        let parents: Vec<Vec<(usize, f64)>> = (0..d)
            .map(|j| dag.edges().iter().filter(|&&(_, c)| c == j).map(|&(i, _)| (i, weights[i][j])).collect())
            .collect();
        let inv_var = noise_vars.iter().map(|&v| 1.0 / v).collect();
        let ln_var = noise_vars.iter().map(|&v| v.ln()).collect();
        let noise_std = noise_vars.iter().map(|&v| v.sqrt()).collect();
        Ok(Scm { dag, weights, noise_vars, parents, inv_var, ln_var, noise_std })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn d(&self) -> usize {
        self.dag.d()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn noise_vars(&self) -> &[f64] {
        &self.noise_vars
    }

    /// Parent list of `node` with edge weights, in edge order.
    pub fn parent_weights(&self, node: usize) -> &[(usize, f64)] {
        &self.parents[node]
    }

    pub fn noise_std(&self, node: usize) -> f64 {
        self.noise_std[node]
    }

    pub(crate) fn inv_var(&self, node: usize) -> f64 {
        self.inv_var[node]
    }

    pub(crate) fn ln_var(&self, node: usize) -> f64 {
        self.ln_var[node]
    }

    /// Mechanism mean of `node` given a full outcome vector.
    #[inline]
    pub fn mechanism_mean(&self, node: usize, y: &[f64]) -> f64 {
        self.parents[node].iter().map(|&(i, w)| w * y[i]).sum()
    }
}

/// An intervention: targets are fixed to states, `do(X_I = S^I)`. An empty
/// target set is the observational regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignRepr", into = "DesignRepr")]
pub struct Design {
    targets: Vec<usize>,
    states: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct DesignRepr {
    targets: Vec<usize>,
    states: Vec<f64>,
}

impl TryFrom<DesignRepr> for Design {
    type Error = Error;
    fn try_from(r: DesignRepr) -> Result<Self> {
        Design::new(r.targets, r.states)
    }
}

impl From<Design> for DesignRepr {
    fn from(d: Design) -> Self {
        DesignRepr { targets: d.targets, states: d.states }
    }
}

impl Design {
    pub fn new(targets: Vec<usize>, states: Vec<f64>) -> Result<Self> {
        if targets.len() != states.len() {
            return Err(Error::Dimension("one state per target".into()));
        }
        let mut pairs: Vec<(usize, f64)> = targets.into_iter().zip(states).collect();
        pairs.sort_by_key(|&(t, _)| t);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("duplicate intervention target".into()));
        }
        let (targets, states) = pairs.into_iter().unzip();
        Ok(Design { targets, states })
    }

    pub fn observational() -> Self {
        Design { targets: Vec::new(), states: Vec::new() }
    }

    pub fn is_observational(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state_of(&self, node: usize) -> Option<f64> {
        self.targets.binary_search(&node).ok().map(|k| self.states[k])
    }

    pub fn intervenes(&self, node: usize) -> bool {
        self.targets.binary_search(&node).is_ok()
    }

    pub fn validate_for(&self, d: usize) -> Result<()> {
        if self.targets.iter().any(|&t| t >= d) {
            return Err(Error::Dimension(format!("target out of range for d={d}")));
        }
        Ok(())
    }
}

/// A batch of `B` designs executed together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBatch {
    pub designs: Vec<Design>,
}

impl DesignBatch {
    pub fn new(designs: Vec<Design>) -> Self {
        DesignBatch { designs }
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }
}

/// Samples drawn under one design; intervened columns are constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    pub n: usize,
    pub values: Vec<Vec<f64>>,
    pub provenance: Design,
}

/// Ancestral sampling in topological order. Intervened coordinates are set
/// exactly to their states; no noise is added to them.
pub fn sample(scm: &Scm, design: &Design, n: usize, rng: &mut RngStream) -> Result<SampleMatrix> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    design.validate_for(scm.d())?;
    let d = scm.d();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = vec![0.0; d];
        sample_row(scm, design, &mut y, rng);
        values.push(y);
    }
    Ok(SampleMatrix { n, values, provenance: design.clone() })
}

/// One ancestral draw into `y`.
pub fn sample_row(scm: &Scm, design: &Design, y: &mut [f64], rng: &mut RngStream) {
    for &j in scm.dag().topological_order() {
        y[j] = match design.state_of(j) {
            Some(s) => s,
            None => {
                let eps: f64 = rng.sample(StandardNormal);
                scm.mechanism_mean(j, y) + scm.noise_std(j) * eps
            }
        };
    }
}

/// Interventional log-likelihood of one outcome vector: the sum of Gaussian
/// factors over non-intervened nodes only. Intervened nodes contribute no
/// factor, so their entries (and noise variances) never enter the value.
pub fn log_likelihood(scm: &Scm, y: &[f64], design: &Design) -> f64 {
    let mut acc = 0.0;
    for j in 0..scm.d() {
        if design.intervenes(j) {
            continue;
        }
        acc += normal_logpdf(y[j], scm.mechanism_mean(j, y), scm.noise_vars()[j]);
    }
    acc
}

/// Joint log-likelihood of a batch: one outcome vector per design, factors
/// summed across the independent experiments.
pub fn batch_log_likelihood(scm: &Scm, outcomes: &[Vec<f64>], batch: &DesignBatch) -> Result<f64> {
    if outcomes.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "batch has {} designs but {} outcomes",
            batch.len(),
            outcomes.len()
        )));
    }
    Ok(outcomes
        .iter()
        .zip(&batch.designs)
        .map(|(y, design)| log_likelihood(scm, y, design))
        .sum())
}
