//! Design policies over intervention targets and states.
//!
//! Targets are sampled from temperature-controlled relaxations of discrete
//! distributions (categorical, Bernoulli, or top-k subset), combined with
//! straight-through hard samples; states are a deterministic per-target
//! parameter. Gradients flow through the soft values via the VJPs here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::zeros;
use crate::rng::RngStream;
use crate::scm::{Design, DesignBatch};
use rand::Rng;

/// Target-selection regime of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Exactly one target per design (relaxed categorical).
    Single,
    /// Any subset of targets (relaxed Bernoulli per node).
    MultiUnconstrained,
    /// Exactly `k` targets per design (relaxed top-k).
    MultiConstrained { k: usize },
}

impl PolicyMode {
    pub fn k(&self) -> Option<usize> {
        match self {
            PolicyMode::MultiConstrained { k } => Some(*k),
            _ => None,
        }
    }
}

/// Learnable design-policy parameters: target logits and per-target states,
/// one row per design in the batch, plus the relaxation temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub mode: PolicyMode,
    pub target_logits: Vec<Vec<f64>>,
    pub state_values: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl PolicyParams {
    pub fn new(
        mode: PolicyMode,
        target_logits: Vec<Vec<f64>>,
        state_values: Vec<Vec<f64>>,
        temperature: f64,
    ) -> Result<Self> {
        let b = target_logits.len();
        if b == 0 || state_values.len() != b {
            return Err(Error::Dimension("logits and states need matching B >= 1".into()));
        }
        let d = target_logits[0].len();
        if target_logits.iter().chain(state_values.iter()).any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged policy parameter rows".into()));
        }
        if let PolicyMode::MultiConstrained { k } = mode {
            if k == 0 || k > d {
                return Err(Error::Config(format!("constrained k={k} must satisfy 1 <= k <= {d}")));
            }
        }
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(PolicyParams { mode, target_logits, state_values, temperature })
    }

    pub fn zeros(mode: PolicyMode, b: usize, d: usize, temperature: f64) -> Result<Self> {
        Self::new(mode, zeros(b, d), zeros(b, d), temperature)
    }

    pub fn batch_size(&self) -> usize {
        self.target_logits.len()
    }

    pub fn d(&self) -> usize {
        self.target_logits[0].len()
    }
}

/// JSON checkpoint schema for a policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub mode: String,
    pub k: Option<usize>,
    pub target_logits: Vec<Vec<f64>>,
    pub state_values: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl From<&PolicyParams> for PolicyCheckpoint {
    fn from(p: &PolicyParams) -> Self {
        let (mode, k) = match p.mode {
            PolicyMode::Single => ("single", None),
            PolicyMode::MultiUnconstrained => ("multi_unconstrained", None),
            PolicyMode::MultiConstrained { k } => ("multi_constrained", Some(k)),
        };
        PolicyCheckpoint {
            mode: mode.to_string(),
            k,
            target_logits: p.target_logits.clone(),
            state_values: p.state_values.clone(),
            temperature: p.temperature,
        }
    }
}

impl TryFrom<PolicyCheckpoint> for PolicyParams {
    type Error = Error;
    fn try_from(c: PolicyCheckpoint) -> Result<Self> {
        let mode = match (c.mode.as_str(), c.k) {
            ("single", _) => PolicyMode::Single,
            ("multi_unconstrained", _) => PolicyMode::MultiUnconstrained,
            ("multi_constrained", Some(k)) => PolicyMode::MultiConstrained { k },
            (m, k) => return Err(Error::Config(format!("bad policy mode {m:?} (k={k:?})"))),
        };
        PolicyParams::new(mode, c.target_logits, c.state_values, c.temperature)
    }
}

/// Frozen relaxation noise: Gumbel draws for single/constrained modes,
/// logistic draws for the unconstrained mode. One value per (design, node).
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxNoise {
    pub values: Vec<Vec<f64>>,
}

pub fn draw_relax_noise(mode: PolicyMode, b: usize, d: usize, rng: &mut RngStream) -> RelaxNoise {
    let values = (0..b)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
                    match mode {
                        PolicyMode::Single | PolicyMode::MultiConstrained { .. } => -(-u.ln()).ln(),
                        PolicyMode::MultiUnconstrained => u.ln() - (1.0 - u).ln(),
                    }
                })
                .collect()
        })
        .collect();
    RelaxNoise { values }
}

/// One relaxed design draw: soft targets (gradients flow here), hard targets
/// (forward evaluation and execution), states and their hard-masked values.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedDesignSample {
    pub soft_targets: Vec<Vec<f64>>,
    pub hard_targets: Vec<Vec<bool>>,
    pub states: Vec<Vec<f64>>,
    pub masked_states: Vec<Vec<f64>>,
}

/// Deterministic relaxation given frozen noise.
pub fn relax_with_noise(params: &PolicyParams, noise: &RelaxNoise) -> RelaxedDesignSample {
    let (b, d, tau) = (params.batch_size(), params.d(), params.temperature);
    let mut soft = zeros(b, d);
    let mut hard = vec![vec![false; d]; b];
    for row in 0..b {
        let logits = &params.target_logits[row];
        let g = &noise.values[row];
        match params.mode {
            PolicyMode::Single => {
                let perturbed: Vec<f64> = (0..d).map(|j| logits[j] + g[j]).collect();
                soft[row] = scaled_softmax(&perturbed, tau);
                hard[row][argmax(&perturbed)] = true;
            }
            PolicyMode::MultiUnconstrained => {
                for j in 0..d {
                    let s = sigmoid((logits[j] + g[j]) / tau);
                    soft[row][j] = s;
                    hard[row][j] = s > 0.5;
                }
            }
            PolicyMode::MultiConstrained { k } => {
                let perturbed: Vec<f64> = (0..d).map(|j| logits[j] + g[j]).collect();
                let (s, _) = relaxed_top_k(&perturbed, k, tau);
                soft[row] = s;
                for &j in top_k_indices(&perturbed, k).iter() {
                    hard[row][j] = true;
                }
            }
        }
    }
    let masked: Vec<Vec<f64>> = (0..b)
        .map(|row| {
            (0..d)
                .map(|j| if hard[row][j] { params.state_values[row][j] } else { 0.0 })
                .collect()
        })
        .collect();
    RelaxedDesignSample {
        soft_targets: soft,
        hard_targets: hard,
        states: params.state_values.clone(),
        masked_states: masked,
    }
}

/// Draws fresh relaxation noise and relaxes.
pub fn sample_relaxed(params: &PolicyParams, rng: &mut RngStream) -> RelaxedDesignSample {
    let noise = draw_relax_noise(params.mode, params.batch_size(), params.d(), rng);
    relax_with_noise(params, &noise)
}

/// Vector-Jacobian product of the soft targets with respect to the logits:
/// given `adjoint = df/d(soft)`, returns `df/d(logits)` for the same frozen
/// noise. This is the straight-through gradient path.
pub fn relax_vjp(
    params: &PolicyParams,
    noise: &RelaxNoise,
    adjoint: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (b, d, tau) = (params.batch_size(), params.d(), params.temperature);
    let mut grad = zeros(b, d);
    for row in 0..b {
        let logits = &params.target_logits[row];
        let g = &noise.values[row];
        let adj = &adjoint[row];
        match params.mode {
            PolicyMode::Single => {
                let perturbed: Vec<f64> = (0..d).map(|j| logits[j] + g[j]).collect();
                let a = scaled_softmax(&perturbed, tau);
                let dot: f64 = (0..d).map(|j| adj[j] * a[j]).sum();
                for j in 0..d {
                    grad[row][j] = a[j] * (adj[j] - dot) / tau;
                }
            }
            PolicyMode::MultiUnconstrained => {
                for j in 0..d {
                    let s = sigmoid((logits[j] + g[j]) / tau);
                    grad[row][j] = adj[j] * s * (1.0 - s) / tau;
                }
            }
            PolicyMode::MultiConstrained { k } => {
                let perturbed: Vec<f64> = (0..d).map(|j| logits[j] + g[j]).collect();
                let (_, alphas) = relaxed_top_k(&perturbed, k, tau);
                grad[row] = top_k_vjp(&alphas, adj, tau);
            }
        }
    }
    grad
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

fn scaled_softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / xs.len() as f64; xs.len()];
    }
    let exps: Vec<f64> = xs.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices of the k largest entries, ties broken by lower index.
fn top_k_indices(xs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Relaxed top-k by iterative softmax with soft exclusion: after each pass
/// the selected mass is excluded by adding `ln(1 - alpha)` to the logits.
/// At low temperature this reduces to picking the k largest entries.
/// Returns the soft k-hot vector (rows sum to k) and the per-pass softmaxes.
fn relaxed_top_k(perturbed: &[f64], k: usize, tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = perturbed.len();
    let mut exc = perturbed.to_vec();
    let mut alphas = Vec::with_capacity(k);
    let mut soft = vec![0.0; d];
    for t in 0..k {
        let alpha = scaled_softmax(&exc, tau);
        for j in 0..d {
            soft[j] += alpha[j];
        }
        if t + 1 < k {
            for j in 0..d {
                exc[j] += (-alpha[j]).ln_1p();
            }
        }
        alphas.push(alpha);
    }
    (soft, alphas)
}

/// Backward pass of [`relaxed_top_k`] for a fixed adjoint on the soft k-hot.
fn top_k_vjp(alphas: &[Vec<f64>], adjoint: &[f64], tau: f64) -> Vec<f64> {
    let d = adjoint.len();
    let k = alphas.len();
    let mut r_bar = vec![0.0; d]; // adjoint on the logits entering stage t+1
    for t in (0..k).rev() {
        let alpha = &alphas[t];
        let mut a_bar: Vec<f64> = adjoint.to_vec();
        if t + 1 < k {
            for j in 0..d {
                if r_bar[j] != 0.0 {
                    let one_minus = 1.0 - alpha[j];
                    if one_minus > 0.0 {
                        a_bar[j] += r_bar[j] * (-1.0 / one_minus);
                    }
                }
            }
        }
        let dot: f64 = (0..d).map(|j| a_bar[j] * alpha[j]).sum();
        for j in 0..d {
            r_bar[j] += alpha[j] * (a_bar[j] - dot) / tau;
        }
    }
    r_bar
}

/// Converts a hard sample into an executable batch of designs.
pub fn to_design_batch(sample: &RelaxedDesignSample) -> Result<DesignBatch> {
    let designs = sample
        .hard_targets
        .iter()
        .zip(&sample.states)
        .map(|(hard, states)| {
            let targets: Vec<usize> =
                hard.iter().enumerate().filter(|(_, &h)| h).map(|(j, _)| j).collect();
            let values: Vec<f64> = targets.iter().map(|&j| states[j]).collect();
            Design::new(targets, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignBatch::new(designs))
}

/// Temperature schedule across optimization steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TempSchedule {
    /// Geometric interpolation from `start` to `end`.
    Geometric { start: f64, end: f64 },
    Fixed { value: f64 },
}

impl Default for TempSchedule {
    fn default() -> Self {
        TempSchedule::Geometric { start: 5.0, end: 0.5 }
    }
}

/// Temperature at step `c` of `total`: geometric interpolation
/// `start * (end/start)^(c/total)`.
pub fn anneal_temperature(schedule: TempSchedule, c: usize, total: usize) -> f64 {
    match schedule {
        TempSchedule::Fixed { value } => value,
        TempSchedule::Geometric { start, end } => {
            if total == 0 {
                return start;
            }
            let frac = c as f64 / total as f64;
            start * (end / start).powf(frac)
        }
    }
}

/// State rule for the random baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StateRule {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// Random design baseline: targets uniform over the mode's support, states
/// per rule.
pub fn random_baseline(
    mode: PolicyMode,
    state_rule: StateRule,
    b: usize,
    d: usize,
    rng: &mut RngStream,
) -> Result<DesignBatch> {
    let mut designs = Vec::with_capacity(b);
    for _ in 0..b {
        let targets: Vec<usize> = match mode {
            PolicyMode::Single => vec![rng.random_range(0..d)],
            PolicyMode::MultiUnconstrained => {
                (0..d).filter(|_| rng.random::<f64>() < 0.5).collect()
            }
            PolicyMode::MultiConstrained { k } => {
                let mut pool: Vec<usize> = (0..d).collect();
                for i in 0..k {
                    let j = rng.random_range(i..d);
                    pool.swap(i, j);
                }
                let mut chosen = pool[..k].to_vec();
                chosen.sort_unstable();
                chosen
            }
        };
        let states: Vec<f64> = targets
            .iter()
            .map(|_| match state_rule {
                StateRule::Fixed { value } => value,
                StateRule::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            })
            .collect();
        designs.push(Design::new(targets, states)?);
    }
    Ok(DesignBatch::new(designs))
}

/// Clamps state parameters into the design range.
pub fn clip_states(params: &mut PolicyParams, lo: f64, hi: f64) {
    for row in &mut params.state_values {
        for s in row.iter_mut() {
            *s = s.clamp(lo, hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn params(mode: PolicyMode, logits: Vec<Vec<f64>>, tau: f64) -> PolicyParams {
        let states = zeros(logits.len(), logits[0].len());
        PolicyParams::new(mode, logits, states, tau).unwrap()
    }

    #[test]
    fn near_zero_temperature_reproduces_gumbel_max_sampling() {
        // hard sample must equal argmax(logits + gumbel): exact categorical
        let logits = vec![vec![1.0, 0.0, -1.0, 0.5]];
        let p = params(PolicyMode::Single, logits.clone(), 1e-4);
        let mut rng = stream(31);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let noise = draw_relax_noise(p.mode, 1, 4, &mut rng);
            let s = relax_with_noise(&p, &noise);
            let hard_idx = s.hard_targets[0].iter().position(|&h| h).unwrap();
            let manual = {
                let vals: Vec<f64> =
                    (0..4).map(|j| logits[0][j] + noise.values[0][j]).collect();
                argmax(&vals)
            };
            assert_eq!(hard_idx, manual);
            counts[hard_idx] += 1;
            // the hard index always carries the largest soft weight
            let soft_max = s.soft_targets[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s.soft_targets[0][hard_idx], soft_max);
        }
        let probs = scaled_softmax(&logits[0], 1.0);
        for j in 0..4 {
            let freq = counts[j] as f64 / n as f64;
            assert!((freq - probs[j]).abs() < 0.02, "node {j}: {freq} vs {}", probs[j]);
        }
    }

    #[test]
    fn dominant_logit_always_selected() {
        let mut logits = vec![vec![0.0; 5]];
        logits[0][2] = 40.0;
        let p = params(PolicyMode::Single, logits, 1.0);
        let mut rng = stream(32);
        for _ in 0..10_000 {
            let s = sample_relaxed(&p, &mut rng);
            assert!(s.hard_targets[0][2]);
        }
    }

    #[test]
    fn constrained_marginals_match_brute_force_oracle() {
        // oracle: Monte Carlo over fresh Gumbel perturbations, counting
        // membership of each node in the top-2 of (logits + gumbel)
        let logits = vec![10.0, 10.0, -10.0, -10.0];
        let p = params(PolicyMode::MultiConstrained { k: 2 }, vec![logits.clone()], 1.0);
        let mut rng = stream(33);
        let n = 100_000;
        let mut sel = [0usize; 4];
        let mut exact_top_pair = 0usize;
        for _ in 0..n {
            let s = sample_relaxed(&p, &mut rng);
            for j in 0..4 {
                if s.hard_targets[0][j] {
                    sel[j] += 1;
                }
            }
            if s.hard_targets[0][0] && s.hard_targets[0][1] {
                exact_top_pair += 1;
            }
        }
        assert!(exact_top_pair as f64 / n as f64 >= 0.99);

        let mut oracle_rng = stream(34);
        let mut oracle_sel = [0usize; 4];
        for _ in 0..n {
            let noise = draw_relax_noise(PolicyMode::Single, 1, 4, &mut oracle_rng);
            let vals: Vec<f64> = (0..4).map(|j| logits[j] + noise.values[0][j]).collect();
            for &j in top_k_indices(&vals, 2).iter() {
                oracle_sel[j] += 1;
            }
        }
        for j in 0..4 {
            let a = sel[j] as f64 / n as f64;
            let b = oracle_sel[j] as f64 / n as f64;
            assert!((a - b).abs() < 0.01, "node {j}: {a} vs {b}");
        }
    }

    #[test]
    fn soft_rows_satisfy_mode_invariants() {
        let mut rng = stream(35);
        for tau in [0.5, 1.0, 3.0, 5.0] {
            let p1 = params(PolicyMode::Single, vec![vec![0.3, -1.0, 2.0]], tau);
            let s1 = sample_relaxed(&p1, &mut rng);
            let sum: f64 = s1.soft_targets[0].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert_eq!(s1.hard_targets[0].iter().filter(|&&h| h).count(), 1);

            let p2 = params(PolicyMode::MultiUnconstrained, vec![vec![0.3, -1.0, 2.0]], tau);
            let s2 = sample_relaxed(&p2, &mut rng);
            assert!(s2.soft_targets[0].iter().all(|&v| v > 0.0 && v < 1.0));

            let p3 = params(PolicyMode::MultiConstrained { k: 2 }, vec![vec![0.3, -1.0, 2.0]], tau);
            let s3 = sample_relaxed(&p3, &mut rng);
            let sum3: f64 = s3.soft_targets[0].iter().sum();
            assert!((sum3 - 2.0).abs() < 1e-6, "sum {sum3}");
            assert_eq!(s3.hard_targets[0].iter().filter(|&&h| h).count(), 2);
        }
    }

    #[test]
    fn to_design_batch_maps_rows_in_order() {
        let sample = RelaxedDesignSample {
            soft_targets: vec![vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]],
            hard_targets: vec![vec![false, true, false], vec![false, false, true]],
            states: vec![vec![5.0, -2.0, 7.0], vec![1.0, 2.0, 3.0]],
            masked_states: vec![vec![0.0, -2.0, 0.0], vec![0.0, 0.0, 3.0]],
        };
        let batch = to_design_batch(&sample).unwrap();
        assert_eq!(batch.designs[0].targets(), &[1]);
        assert_eq!(batch.designs[0].states(), &[-2.0]);
        assert_eq!(batch.designs[1].targets(), &[2]);
        assert_eq!(batch.designs[1].states(), &[3.0]);
    }

    #[test]
    fn all_zero_hard_row_becomes_observational() {
        let sample = RelaxedDesignSample {
            soft_targets: vec![vec![0.4, 0.4]],
            hard_targets: vec![vec![false, false]],
            states: vec![vec![1.0, 2.0]],
            masked_states: vec![vec![0.0, 0.0]],
        };
        let batch = to_design_batch(&sample).unwrap();
        assert!(batch.designs[0].is_observational());
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let sched = TempSchedule::default();
        assert_eq!(anneal_temperature(sched, 0, 100), 5.0);
        assert!((anneal_temperature(sched, 100, 100) - 0.5).abs() < 1e-12);
        let mid = anneal_temperature(sched, 50, 100);
        assert!((mid - (5.0f64 * 0.5).sqrt()).abs() < 1e-12, "mid {mid}");
        assert!((mid - 1.5811388300841898).abs() < 1e-12);
    }

    #[test]
    fn random_fixed_baselines_use_exact_states() {
        let mut rng = stream(36);
        let single =
            random_baseline(PolicyMode::Single, StateRule::Fixed { value: 0.0 }, 4, 6, &mut rng)
                .unwrap();
        for d in &single.designs {
            assert_eq!(d.targets().len(), 1);
            assert_eq!(d.states(), &[0.0]);
        }
        let multi = random_baseline(
            PolicyMode::MultiUnconstrained,
            StateRule::Fixed { value: 5.0 },
            4,
            6,
            &mut rng,
        )
        .unwrap();
        for d in &multi.designs {
            assert!(d.states().iter().all(|&s| s == 5.0));
        }
    }

    #[test]
    fn random_random_states_stay_in_bounds() {
        let mut rng = stream(37);
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..2000 {
            let batch = random_baseline(
                PolicyMode::Single,
                StateRule::Uniform { lo: -10.0, hi: 10.0 },
                1,
                4,
                &mut rng,
            )
            .unwrap();
            let s = batch.designs[0].states()[0];
            assert!((-10.0..=10.0).contains(&s));
            sum += s;
            count += 1;
        }
        assert!((sum / count as f64).abs() < 0.5);
    }

    #[test]
    fn argmax_distribution_invariant_to_logit_shift() {
        // chi^2 two-sample over hard selections with shifted logits
        let base = vec![vec![0.5, -0.2, 1.0, 0.0, -1.0]];
        let shifted = vec![base[0].iter().map(|x| x + 3.7).collect::<Vec<f64>>()];
        let n = 100_000;
        let mut c1 = [0usize; 5];
        let mut c2 = [0usize; 5];
        let p1 = params(PolicyMode::Single, base, 1.0);
        let p2 = params(PolicyMode::Single, shifted, 1.0);
        let mut r1 = stream(38);
        let mut r2 = stream(39);
        for _ in 0..n {
            let s1 = sample_relaxed(&p1, &mut r1);
            let s2 = sample_relaxed(&p2, &mut r2);
            c1[s1.hard_targets[0].iter().position(|&h| h).unwrap()] += 1;
            c2[s2.hard_targets[0].iter().position(|&h| h).unwrap()] += 1;
        }
        let chi2: f64 = (0..5)
            .map(|j| {
                let (a, b) = (c1[j] as f64, c2[j] as f64);
                (a - b).powi(2) / (a + b)
            })
            .sum();
        // 4 dof, p = 0.001 critical value is 18.47
        assert!(chi2 < 18.47, "chi2 {chi2}: {c1:?} vs {c2:?}");
    }

    #[test]
    fn entropy_is_nonincreasing_as_temperature_drops() {
        let logits = vec![vec![0.5, -0.3, 0.8, 0.0]];
        let temps = [5.0, 2.0, 1.0, 0.5];
        let mut rng = stream(40);
        let mut last = f64::INFINITY;
        for &tau in &temps {
            // common random numbers: same noise at every temperature
            let mut sum_h = 0.0;
            let n = 2000;
            let mut noise_rng = stream(41);
            for _ in 0..n {
                let noise = draw_relax_noise(PolicyMode::Single, 1, 4, &mut noise_rng);
                let p = params(PolicyMode::Single, logits.clone(), tau);
                let s = relax_with_noise(&p, &noise);
                sum_h -= s.soft_targets[0]
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>();
            }
            let mean_h = sum_h / n as f64;
            assert!(mean_h <= last + 1e-9, "entropy rose: {mean_h} > {last} at tau {tau}");
            last = mean_h;
            let _ = &mut rng;
        }
    }

    #[test]
    fn relax_vjp_matches_finite_differences() {
        let modes = [
            PolicyMode::Single,
            PolicyMode::MultiUnconstrained,
            PolicyMode::MultiConstrained { k: 2 },
        ];
        let mut rng = stream(42);
        for &mode in &modes {
            for &tau in &[0.7, 1.5, 4.0] {
                let d = 5;
                let logits: Vec<Vec<f64>> =
                    vec![(0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()];
                let p = params(mode, logits.clone(), tau);
                let noise = draw_relax_noise(mode, 1, d, &mut rng);
                let adj: Vec<Vec<f64>> =
                    vec![(0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()];
                let grad = relax_vjp(&p, &noise, &adj);
                let f = |pp: &PolicyParams| -> f64 {
                    let s = relax_with_noise(pp, &noise);
                    (0..d).map(|j| adj[0][j] * s.soft_targets[0][j]).sum()
                };
                for j in 0..d {
                    let h = 1e-6;
                    let mut up = p.clone();
                    up.target_logits[0][j] += h;
                    let mut dn = p.clone();
                    dn.target_logits[0][j] -= h;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    let denom = fd.abs().max(grad[0][j].abs()).max(1e-8);
                    assert!(
                        (fd - grad[0][j]).abs() / denom < 1e-4,
                        "{mode:?} tau {tau} j {j}: fd {fd} vs vjp {}",
                        grad[0][j]
                    );
                }
            }
        }
    }
}
