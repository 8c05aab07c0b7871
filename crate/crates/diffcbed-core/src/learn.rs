//! Score-based structure learning: greedy hill climbing over single-edge
//! insert/delete/reverse moves, scored by BIC with interventional
//! likelihoods (a node's factor is dropped for records that intervene on it).

use std::collections::HashMap;

use crate::error::Result;
use crate::math::LN_2PI;
use crate::rng::RngStream;
use crate::scm::{Dag, Design, Scm};
use rand::seq::SliceRandom;
use rand::Rng;

/// One observed record: the design it was drawn under and the outcome.
pub type Record = (Design, Vec<f64>);

#[derive(Debug, Clone)]
pub struct LearnConfig {
    /// Number of hill-climbing restarts; the first starts from the empty
    /// graph, the rest from random DAGs.
    pub restarts: usize,
    /// Edge probability for random restart graphs.
    pub restart_edge_prob: f64,
    /// Ridge strength for degenerate regressions.
    pub ridge: f64,
    /// Lower bound on fitted noise variances.
    pub var_floor: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig { restarts: 5, restart_edge_prob: 0.3, ridge: 1e-6, var_floor: 1e-6 }
    }
}

/// Per-node regression of `y_node` on its parents over the records that do
/// not intervene on `node`. Returns (weights, rss, n_used, degenerate).
fn regress(
    node: usize,
    parents: &[usize],
    records: &[Record],
    ridge: f64,
) -> (Vec<f64>, f64, usize, bool) {
    let p = parents.len();
    let rows: Vec<&Vec<f64>> =
        records.iter().filter(|(design, _)| !design.intervenes(node)).map(|(_, y)| y).collect();
    let n = rows.len();
    if n == 0 {
        return (vec![0.0; p], 0.0, 0, true);
    }
    if p == 0 {
        let rss: f64 = rows.iter().map(|y| y[node] * y[node]).sum();
        return (Vec::new(), rss, n, false);
    }
    let degenerate = n <= p;
    let lambda = if degenerate { ridge.max(1e-12) } else { 0.0 };
    // normal equations
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    let mut yty = 0.0;
    for y in &rows {
        for a in 0..p {
            let xa = y[parents[a]];
            xty[a] += xa * y[node];
            for b in a..p {
                xtx[a][b] += xa * y[parents[b]];
            }
        }
        yty += y[node] * y[node];
    }
    for a in 0..p {
        for b in 0..a {
            xtx[a][b] = xtx[b][a];
        }
        xtx[a][a] += lambda;
    }
    let w = match solve_spd(&mut xtx, &mut xty.clone()) {
        Some(w) => w,
        None => {
            // singular without ridge: retry with ridge
            let mut xtx2 = xtx.clone();
            for a in 0..p {
                xtx2[a][a] += ridge.max(1e-12);
            }
            solve_spd(&mut xtx2, &mut xty.clone()).unwrap_or_else(|| vec![0.0; p])
        }
    };
    let mut rss = yty;
    for a in 0..p {
        rss -= w[a] * xty[a];
    }
    // tiny negative values from cancellation
    if rss < 0.0 {
        rss = 0.0;
    }
    (w, rss, n, degenerate)
}

/// Gaussian elimination with partial pivoting on a small symmetric system.
fn solve_spd(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let diag = a[col][col];
        for r in (col + 1)..n {
            let f = a[r][col] / diag;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in (r + 1)..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}

/// BIC contribution of one node under a parent set: maximized Gaussian
/// log-likelihood minus (|parents| + 1)/2 * ln(n).
fn node_score(node: usize, parents: &[usize], records: &[Record], cfg: &LearnConfig) -> f64 {
    let (_, rss, n, _) = regress(node, parents, records, cfg.ridge);
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let var = (rss / nf).max(cfg.var_floor);
    let loglik = -0.5 * nf * (LN_2PI + var.ln() + 1.0);
    let params = parents.len() as f64 + 1.0;
    loglik - 0.5 * params * nf.ln()
}

struct Search<'a> {
    d: usize,
    records: &'a [Record],
    cfg: &'a LearnConfig,
    cache: HashMap<(usize, u64), f64>,
}

impl<'a> Search<'a> {
    fn score(&mut self, node: usize, mask: u64) -> f64 {
        if let Some(&s) = self.cache.get(&(node, mask)) {
            return s;
        }
        let parents: Vec<usize> = (0..self.d).filter(|&i| mask & (1 << i) != 0).collect();
        let s = node_score(node, &parents, self.records, self.cfg);
        self.cache.insert((node, mask), s);
        s
    }

    fn climb(&mut self, adj: &mut Vec<Vec<bool>>, masks: &mut Vec<u64>) -> f64 {
        let d = self.d;
        let mut total: f64 = (0..d).map(|j| self.score(j, masks[j])).sum();
        loop {
            let mut best: Option<(f64, usize, usize, Move)> = None;
            for i in 0..d {
                for j in 0..d {
                    if i == j {
                        continue;
                    }
                    if adj[i][j] {
                        // delete i -> j
                        let delta = self.score(j, masks[j] & !(1 << i)) - self.score(j, masks[j]);
                        consider(&mut best, delta, i, j, Move::Delete);
                        // reverse i -> j, legal if no other path i ~> j
                        adj[i][j] = false;
                        let legal = !has_path(adj, i, j);
                        adj[i][j] = true;
                        if legal {
                            let delta = self.score(j, masks[j] & !(1 << i))
                                - self.score(j, masks[j])
                                + self.score(i, masks[i] | (1 << j))
                                - self.score(i, masks[i]);
                            consider(&mut best, delta, i, j, Move::Reverse);
                        }
                    } else if !has_path(adj, j, i) {
                        // insert i -> j keeps the graph acyclic
                        let delta = self.score(j, masks[j] | (1 << i)) - self.score(j, masks[j]);
                        consider(&mut best, delta, i, j, Move::Insert);
                    }
                }
            }
            match best {
                Some((delta, i, j, mv)) if delta > 1e-9 => {
                    match mv {
                        Move::Insert => {
                            adj[i][j] = true;
                            masks[j] |= 1 << i;
                        }
                        Move::Delete => {
                            adj[i][j] = false;
                            masks[j] &= !(1 << i);
                        }
                        Move::Reverse => {
                            adj[i][j] = false;
                            masks[j] &= !(1 << i);
                            adj[j][i] = true;
                            masks[i] |= 1 << j;
                        }
                    }
                    total += delta;
                }
                _ => return total,
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Move {
    Insert,
    Delete,
    Reverse,
}

fn consider(best: &mut Option<(f64, usize, usize, Move)>, delta: f64, i: usize, j: usize, mv: Move) {
    if best.as_ref().map_or(true, |&(b, _, _, _)| delta > b) {
        *best = Some((delta, i, j, mv));
    }
}

fn has_path(adj: &[Vec<bool>], from: usize, to: usize) -> bool {
    let d = adj.len();
    let mut seen = vec![false; d];
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if seen[v] {
            continue;
        }
        seen[v] = true;
        for (c, &e) in adj[v].iter().enumerate() {
            if e && !seen[c] {
                stack.push(c);
            }
        }
    }
    false
}

/// Learns a DAG structure from records by restarted greedy hill climbing.
pub fn learn_structure(
    d: usize,
    records: &[Record],
    cfg: &LearnConfig,
    rng: &mut RngStream,
) -> Result<Dag> {
    assert!(d <= 63, "learner supports up to 63 nodes");
    let mut search = Search { d, records, cfg, cache: HashMap::new() };
    let mut best: Option<(f64, Vec<Vec<bool>>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut adj = vec![vec![false; d]; d];
        let mut masks = vec![0u64; d];
        if restart > 0 {
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(rng);
            for a in 0..d {
                for b in (a + 1)..d {
                    if rng.random::<f64>() < cfg.restart_edge_prob {
                        adj[order[a]][order[b]] = true;
                        masks[order[b]] |= 1 << order[a];
                    }
                }
            }
        }
        let score = search.climb(&mut adj, &mut masks);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, adj));
        }
    }
    let (_, adj) = best.unwrap();
    let mut edges = Vec::new();
    for i in 0..d {
        for j in 0..d {
            if adj[i][j] {
                edges.push((i, j));
            }
        }
    }
    Dag::new(d, edges)
}

/// Maximum-likelihood parameters for a fixed structure: per-node least
/// squares on that node's non-intervened records, noise variance from the
/// residual mean square. Degenerate regressions fall back to ridge with a
/// floored variance.
pub fn fit_mle(dag: &Dag, records: &[Record], cfg: &LearnConfig) -> Result<Scm> {
    let d = dag.d();
    let mut weights = vec![vec![0.0; d]; d];
    let mut noise_vars = vec![1.0; d];
    for j in 0..d {
        let parents = dag.parents(j);
        let (w, rss, n, degenerate) = regress(j, &parents, records, cfg.ridge);
        if n == 0 {
            continue; // no usable records: keep prior defaults
        }
        for (idx, &pi) in parents.iter().enumerate() {
            weights[pi][j] = w[idx];
        }
        let var = rss / n as f64;
        noise_vars[j] = if degenerate { var.max(cfg.var_floor) } else { var.max(cfg.var_floor) };
    }
    Scm::new(dag.clone(), weights, noise_vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::scm::{sample, Design};

    fn chain2(w: f64) -> Scm {
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let mut weights = vec![vec![0.0; 2]; 2];
        weights[0][1] = w;
        Scm::new(dag, weights, vec![1.0, 1.0]).unwrap()
    }

    fn draw_records(scm: &Scm, design: &Design, n: usize, rng: &mut RngStream) -> Vec<Record> {
        let m = sample(scm, design, n, rng).unwrap();
        m.values.into_iter().map(|y| (design.clone(), y)).collect()
    }

    #[test]
    fn observational_data_recovers_chain_or_reversal() {
        let scm = chain2(2.0);
        let mut rng = stream(11);
        let records = draw_records(&scm, &Design::observational(), 10_000, &mut rng);
        let g = learn_structure(2, &records, &LearnConfig::default(), &mut rng).unwrap();
        assert_eq!(g.n_edges(), 1, "expected a single edge, got {:?}", g.edges());
    }

    #[test]
    fn interventional_data_orients_the_edge() {
        let scm = chain2(2.0);
        let mut rng = stream(12);
        let mut records = draw_records(&scm, &Design::observational(), 5000, &mut rng);
        let do0 = Design::new(vec![0], vec![2.5]).unwrap();
        records.extend(draw_records(&scm, &do0, 5000, &mut rng));
        let g = learn_structure(2, &records, &LearnConfig::default(), &mut rng).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn mle_recovers_weights_and_variance() {
        let scm = chain2(1.5);
        let mut rng = stream(13);
        let records = draw_records(&scm, &Design::observational(), 20_000, &mut rng);
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let fit = fit_mle(&dag, &records, &LearnConfig::default()).unwrap();
        assert!((fit.weights()[0][1] - 1.5).abs() < 0.05);
        assert!((fit.noise_vars()[1] - 1.0).abs() < 0.05);
    }

    #[test]
    fn near_noiseless_data_gives_tiny_fitted_variance() {
        let dag = Dag::new(2, vec![(0, 1)]).unwrap();
        let mut weights = vec![vec![0.0; 2]; 2];
        weights[0][1] = 1.0;
        let scm = Scm::new(dag.clone(), weights, vec![1.0, 1e-6]).unwrap();
        let mut rng = stream(14);
        let records = draw_records(&scm, &Design::observational(), 500, &mut rng);
        let fit = fit_mle(&dag, &records, &LearnConfig::default()).unwrap();
        assert!(fit.noise_vars()[1] <= 1e-4, "var {}", fit.noise_vars()[1]);
    }

    #[test]
    fn fewer_records_than_parents_uses_ridge() {
        let dag = Dag::new(3, vec![(0, 2), (1, 2)]).unwrap();
        let records = vec![(Design::observational(), vec![1.0, 2.0, 3.0])];
        let fit = fit_mle(&dag, &records, &LearnConfig::default()).unwrap();
        assert!(fit.noise_vars().iter().all(|&v| v >= 1e-6));
    }
}
