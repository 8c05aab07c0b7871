//! Expected-information-gain estimators and their gradients.
//!
//! Both estimators contrast the likelihood of simulated outcomes under the
//! generating particle against a set of contrastive particles. The target
//! masks gate the whole evaluation: each node's outcome blends its
//! mechanism draw with the intervention state through the mask, each factor
//! is weighted by `(1 - mask)` and its mean blends the same way. Masks of
//! exactly 0 or 1 reproduce the hard interventional likelihood bit-for-bit.
//!
//! Straight-through: the reported value evaluates the hard design sample,
//! while gradients differentiate the evaluation at the soft masks and chain
//! through the relaxation into the target logits.
//!
//! All stochastic draws for one evaluation are frozen in a plan, so repeated
//! evaluations at perturbed parameters share common random numbers.

use crate::math::{pairwise_sum, LN_2PI};
use crate::policy::{relax_vjp, relax_with_noise, PolicyParams, RelaxNoise, RelaxedDesignSample};
use crate::posterior::{draw_weighted_index, effective_sample_size, ParticleSet};
use crate::rng::{self, RngStream};
use crate::scm::Scm;
use rand::Rng;
use rand_distr::StandardNormal;

/// Settings for the NMC estimator. Defaults follow the single-target
/// configuration (30 outer draws, 30 contrastive particles).
#[derive(Debug, Clone, Copy)]
pub struct NmcConfig {
    pub n_outer: usize,
    pub l: usize,
    /// Diagnostic mode: append the generating particle to the contrastive
    /// set, bounding every per-draw term by `ln(L + 1)`.
    pub include_outer_in_contrastive: bool,
}

impl Default for NmcConfig {
    fn default() -> Self {
        NmcConfig { n_outer: 30, l: 30, include_outer_in_contrastive: false }
    }
}

/// Settings for the IWNMC estimator.
#[derive(Debug, Clone, Copy)]
pub struct IwnmcConfig {
    /// Effective-sample-size warning threshold.
    pub ess_floor: f64,
}

impl Default for IwnmcConfig {
    fn default() -> Self {
        IwnmcConfig { ess_floor: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub ess: Option<f64>,
    pub n_outer: usize,
    pub l: usize,
    /// Set when a non-finite likelihood was encountered.
    pub invalid: bool,
    /// Set when the particle ESS fell below the configured floor.
    pub low_ess: bool,
    /// Largest per-draw term (useful with the diagnostic contrastive mode).
    pub max_term: f64,
}

/// An estimate of the batch EIG objective with gradients for the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EigEstimate {
    pub value: f64,
    pub grad_target_logits: Vec<Vec<f64>>,
    pub grad_state_values: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl EigEstimate {
    pub fn all_finite(&self) -> bool {
        self.value.is_finite()
            && self
                .grad_target_logits
                .iter()
                .chain(self.grad_state_values.iter())
                .all(|row| row.iter().all(|g| g.is_finite()))
    }
}

/// Contrastive draws: regenerated from per-outer seeds (memory-light) or
/// explicit index lists (used by tests and the leave-one-out construction).
#[derive(Debug, Clone)]
pub enum Contrastive {
    Seeds(Vec<u64>),
    Explicit(Vec<Vec<usize>>),
}

/// Frozen stochastic draws for one NMC evaluation: generating-particle
/// indices, contrastive draws and outcome noise (`n_outer * B * d` normals).
#[derive(Debug, Clone)]
pub struct NmcPlan {
    pub outer_idx: Vec<usize>,
    pub contrastive: Contrastive,
    pub z: Vec<f64>,
}

pub fn draw_nmc_plan(
    set: &ParticleSet,
    cfg: &NmcConfig,
    b: usize,
    rng: &mut RngStream,
) -> NmcPlan {
    let d = set.d();
    let cum = set.cumulative_weights();
    let outer_idx: Vec<usize> =
        (0..cfg.n_outer).map(|_| draw_weighted_index(&cum, rng)).collect();
    let seeds = rng::child_seeds(rng, cfg.n_outer);
    let z: Vec<f64> =
        (0..cfg.n_outer * b * d).map(|_| rng.sample(StandardNormal)).collect();
    NmcPlan { outer_idx, contrastive: Contrastive::Seeds(seeds), z }
}

/// Frozen outcome noise for one IWNMC evaluation (`L * B * d` normals).
#[derive(Debug, Clone)]
pub struct IwnmcPlan {
    pub z: Vec<f64>,
}

pub fn draw_iwnmc_plan(l: usize, b: usize, d: usize, rng: &mut RngStream) -> IwnmcPlan {
    let z: Vec<f64> = (0..l * b * d).map(|_| rng.sample(StandardNormal)).collect();
    IwnmcPlan { z }
}

/// Design evaluation point. The masks gate both the outcome simulation
/// (each node blends its mechanism draw with the intervention state) and the
/// likelihood factors; at masks exactly in {0, 1} the evaluation reproduces
/// the hard design bit-for-bit, and perturbing the masks moves both the
/// outcome distribution and the factor weights — the straight-through
/// gradient channel for target selection.
pub struct DesignEval<'a> {
    pub masks: &'a [Vec<f64>],
    pub states: &'a [Vec<f64>],
}

/// Hard/soft matrices of a relaxed sample, as an evaluation point with masks
/// equal to the hard targets (the straight-through forward value).
pub fn hard_masks(sample: &RelaxedDesignSample) -> Vec<Vec<f64>> {
    sample
        .hard_targets
        .iter()
        .map(|row| row.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// flattened particles for the hot loops

struct Flat {
    d: usize,
    topo: Vec<u32>,
    parent_off: Vec<u32>,
    parent_idx: Vec<u32>,
    parent_w: Vec<f64>,
    inv_var: Vec<f64>,
    ln_var: Vec<f64>,
    noise_std: Vec<f64>,
}

impl Flat {
    fn new(scm: &Scm) -> Flat {
        let d = scm.d();
        let mut parent_off = Vec::with_capacity(d + 1);
        let mut parent_idx = Vec::new();
        let mut parent_w = Vec::new();
        parent_off.push(0);
        for j in 0..d {
            for &(i, w) in scm.parent_weights(j) {
                parent_idx.push(i as u32);
                parent_w.push(w);
            }
            parent_off.push(parent_idx.len() as u32);
        }
        Flat {
            d,
            topo: scm.dag().topological_order().iter().map(|&v| v as u32).collect(),
            parent_off,
            parent_idx,
            parent_w,
            inv_var: (0..d).map(|j| scm.inv_var(j)).collect(),
            ln_var: (0..d).map(|j| scm.ln_var(j)).collect(),
            noise_std: (0..d).map(|j| scm.noise_std(j)).collect(),
        }
    }

    #[inline]
    fn mech_mean(&self, j: usize, y: &[f64]) -> f64 {
        let (lo, hi) = (self.parent_off[j] as usize, self.parent_off[j + 1] as usize);
        let mut m = 0.0;
        for k in lo..hi {
            m += self.parent_w[k] * y[self.parent_idx[k] as usize];
        }
        m
    }
}

/// Packed quadratic forms for fixed masks: the masked log-likelihood of an
/// outcome row is `dot(packed, z(y)) + dot(linear, y) + const`, where `z(y)`
/// collects the products `y_p * y_q` for `p <= q`. The packed coefficients
/// fold in the factor weights, `-1/2`, and the doubling of off-diagonal
/// terms; the linear part vanishes at hard masks.
struct QuadPrograms {
    stride: usize,
    b: usize,
    d: usize,
    packed: Vec<f64>,
    linear: Vec<f64>,
    consts: Vec<f64>,
}

impl QuadPrograms {
    fn build(flats: &[Flat], eval: &DesignEval, d: usize) -> QuadPrograms {
        let b = eval.masks.len();
        let stride = d * (d + 1) / 2;
        let mut packed = vec![0.0; flats.len() * b * stride];
        let mut linear = vec![0.0; flats.len() * b * d];
        let mut consts = vec![0.0; flats.len() * b];
        let pack_index = |p: usize, q: usize| -> usize { p * d - p * (p + 1) / 2 + q };
        let mut v = vec![0.0; d];
        for (g, theta) in flats.iter().enumerate() {
            for row in 0..b {
                let base = (g * b + row) * stride;
                let lin_base = (g * b + row) * d;
                let mut c = 0.0;
                for j in 0..d {
                    let u = eval.masks[row][j];
                    let w_eff = 1.0 - u;
                    if w_eff == 0.0 {
                        continue;
                    }
                    // residual: y_j - (1-u) * mech - u * s = v.y - c_s
                    let (lo, hi) =
                        (theta.parent_off[j] as usize, theta.parent_off[j + 1] as usize);
                    let mut nz: Vec<usize> = Vec::with_capacity(hi - lo + 1);
                    v[j] = 1.0;
                    nz.push(j);
                    for k in lo..hi {
                        let p = theta.parent_idx[k] as usize;
                        v[p] = -w_eff * theta.parent_w[k];
                        nz.push(p);
                    }
                    nz.sort_unstable();
                    let c_s = u * eval.states[row][j];
                    let half_inv = -0.5 * w_eff * theta.inv_var[j];
                    for (a_pos, &p) in nz.iter().enumerate() {
                        for &q in &nz[a_pos..] {
                            let coeff = if p == q { v[p] * v[p] } else { 2.0 * v[p] * v[q] };
                            packed[base + pack_index(p, q)] += half_inv * coeff;
                        }
                    }
                    if c_s != 0.0 {
                        for &p in &nz {
                            linear[lin_base + p] += w_eff * theta.inv_var[j] * c_s * v[p];
                        }
                        c += half_inv * c_s * c_s;
                    }
                    c += -0.5 * w_eff * (theta.ln_var[j] + LN_2PI);
                    for &p in &nz {
                        v[p] = 0.0;
                    }
                }
                consts[g * b + row] = c;
            }
        }
        QuadPrograms { stride, b, d, packed, linear, consts }
    }

    /// Fills the product vector z(y) for one outcome row.
    #[inline]
    fn products(d: usize, y: &[f64], z: &mut [f64]) {
        let mut k = 0;
        for p in 0..d {
            let yp = y[p];
            for q in p..d {
                z[k] = yp * y[q];
                k += 1;
            }
        }
    }

    /// Masked log-likelihood of one row under group `g`.
    #[inline]
    fn ll(&self, g: usize, row: usize, z: &[f64], y: &[f64]) -> f64 {
        let base = (g * self.b + row) * self.stride;
        let a = &self.packed[base..base + self.stride];
        let mut s0 = self.consts[g * self.b + row];
        let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
        let mut i = 0;
        while i + 4 <= a.len() {
            s0 += a[i] * z[i];
            s1 += a[i + 1] * z[i + 1];
            s2 += a[i + 2] * z[i + 2];
            s3 += a[i + 3] * z[i + 3];
            i += 4;
        }
        while i < a.len() {
            s0 += a[i] * z[i];
            i += 1;
        }
        let lin = &self.linear[(g * self.b + row) * self.d..][..self.d];
        for p in 0..self.d {
            s1 += lin[p] * y[p];
        }
        (s0 + s1) + (s2 + s3)
    }
}

/// Quadratic/linear/constant programs for the mask and state adjoints at a
/// fixed mask matrix.
///
/// For each (group, row, node) both `d(masked_ll)/d(mask_j)` and
/// `d(masked_ll)/d(state_j)` are quadratic polynomials of the outcome row,
/// so sums over outer samples factorize: per (m, group) only the
/// coefficient-weighted products of the outcome are aggregated, and node
/// terms are assembled once at the end.
struct AdjointPrograms {
    stride: usize,
    b: usize,
    d: usize,
    beta: Vec<f64>,    // (g, row, node) -> packed quadratic (stride), mask adjoint
    lambda: Vec<f64>,  // (g, row, node) -> linear coefficients (d), mask adjoint
    kappa: Vec<f64>,   // (g, row, node) -> constant, mask adjoint
    sig_lin: Vec<f64>, // (g, row, node) -> linear coefficients (d), state adjoint
    sig_k: Vec<f64>,   // (g, row, node) -> constant, state adjoint
}

impl AdjointPrograms {
    fn build(flats: &[Flat], eval: &DesignEval, d: usize) -> AdjointPrograms {
        let b = eval.masks.len();
        let stride = d * (d + 1) / 2;
        let n = flats.len();
        let mut beta = vec![0.0; n * b * d * stride];
        let mut lambda = vec![0.0; n * b * d * d];
        let mut kappa = vec![0.0; n * b * d];
        let mut sig_lin = vec![0.0; n * b * d * d];
        let mut sig_k = vec![0.0; n * b * d];
        let pack_index = |p: usize, q: usize| -> usize { p * d - p * (p + 1) / 2 + q };
        let mut v = vec![0.0; d];
        let mut w = vec![0.0; d];
        for (g, theta) in flats.iter().enumerate() {
            for row in 0..b {
                for j in 0..d {
                    let node = ((g * b + row) * d + j) * stride;
                    let node_lin = ((g * b + row) * d + j) * d;
                    let node_k = (g * b + row) * d + j;
                    let u = eval.masks[row][j];
                    let w_eff = 1.0 - u;
                    let s_j = eval.states[row][j];
                    let c_s = u * s_j;
                    let inv = theta.inv_var[j];
                    // residual: v.y - c_s with v = e_j - (1-u) * parents
                    let (lo, hi) =
                        (theta.parent_off[j] as usize, theta.parent_off[j + 1] as usize);
                    let mut nz: Vec<usize> = Vec::with_capacity(hi - lo + 1);
                    v[j] = 1.0;
                    nz.push(j);
                    for k in lo..hi {
                        let p = theta.parent_idx[k] as usize;
                        v[p] = -w_eff * theta.parent_w[k];
                        w[p] = theta.parent_w[k];
                        if p != j {
                            nz.push(p);
                        }
                    }
                    nz.sort_unstable();
                    // mask adjoint: -phi + w_eff * g_mu * (s_j - mech)
                    //   -phi = inv/2 * (v.y - c_s)^2 + (ln var + ln 2pi)/2
                    //   second: w_eff * inv * (v.y - c_s) * (s_j - w.y)
                    for (a_pos, &p) in nz.iter().enumerate() {
                        for &q in &nz[a_pos..] {
                            let quad = if p == q {
                                0.5 * inv * v[p] * v[p] - w_eff * inv * v[p] * w[p]
                            } else {
                                inv * v[p] * v[q] - w_eff * inv * (v[p] * w[q] + v[q] * w[p])
                            };
                            beta[node + pack_index(p, q)] += quad;
                        }
                        lambda[node_lin + p] +=
                            -inv * c_s * v[p] + w_eff * inv * (s_j * v[p] + c_s * w[p]);
                        // state adjoint: w_eff * u * inv * (v.y - c_s)
                        sig_lin[node_lin + p] += w_eff * u * inv * v[p];
                    }
                    kappa[node_k] = 0.5 * (theta.ln_var[j] + LN_2PI)
                        + 0.5 * inv * c_s * c_s
                        - w_eff * inv * c_s * s_j;
                    sig_k[node_k] = -(w_eff * u * inv * c_s);
                    for &p in &nz {
                        v[p] = 0.0;
                        w[p] = 0.0;
                    }
                }
            }
        }
        AdjointPrograms { stride, b, d, beta, lambda, kappa, sig_lin, sig_k }
    }

    /// Folds aggregated (z, y, coeff) sums into the mask and state adjoints.
    fn finish(
        &self,
        z_agg: &[f64],
        y_agg: &[f64],
        c_agg: &[f64],
        n_groups: usize,
        adj_mask: &mut [Vec<f64>],
        adj_state: &mut [Vec<f64>],
    ) {
        for g in 0..n_groups {
            for row in 0..self.b {
                let c = c_agg[g * self.b + row];
                let za = &z_agg[(g * self.b + row) * self.stride..][..self.stride];
                let ya = &y_agg[(g * self.b + row) * self.d..][..self.d];
                for j in 0..self.d {
                    let node = ((g * self.b + row) * self.d + j) * self.stride;
                    let node_lin = ((g * self.b + row) * self.d + j) * self.d;
                    let mut acc = self.kappa[(g * self.b + row) * self.d + j] * c;
                    let bcoef = &self.beta[node..node + self.stride];
                    for k in 0..self.stride {
                        acc += bcoef[k] * za[k];
                    }
                    let lcoef = &self.lambda[node_lin..node_lin + self.d];
                    for p in 0..self.d {
                        acc += lcoef[p] * ya[p];
                    }
                    adj_mask[row][j] += acc;
                    let scoef = &self.sig_lin[node_lin..node_lin + self.d];
                    let mut sacc = self.sig_k[(g * self.b + row) * self.d + j] * c;
                    for p in 0..self.d {
                        sacc += scoef[p] * ya[p];
                    }
                    adj_state[row][j] += sacc;
                }
            }
        }
    }
}

/// Gradient of a packed quadratic form at y, added into `out` scaled by the
/// packed entries (off-diagonals are stored doubled, so p == q contributes
/// twice through the symmetric loop).
#[inline]
fn quad_grad(packed: &[f64], d: usize, y: &[f64], out: &mut [f64]) {
    let mut k = 0;
    for p in 0..d {
        for q in p..d {
            let a = packed[k];
            if a != 0.0 {
                out[p] += a * y[q];
                out[q] += a * y[p];
            }
            k += 1;
        }
    }
}

/// Ancestral simulation of one design row with mask blending: every node's
/// mechanism draw is computed (stored in `base`), and the outcome blends it
/// with the intervention state through the mask. Masks of exactly 0 or 1
/// reproduce the hard design bit-for-bit.
fn simulate(theta: &Flat, masks: &[f64], states: &[f64], z: &[f64], y: &mut [f64], base: &mut [f64]) {
    for &jv in &theta.topo {
        let j = jv as usize;
        let mech = theta.mech_mean(j, y) + theta.noise_std[j] * z[j];
        base[j] = mech;
        let u = masks[j];
        y[j] = if u == 1.0 {
            states[j]
        } else if u == 0.0 {
            mech
        } else {
            u * states[j] + (1.0 - u) * mech
        };
    }
}

/// Masked log-likelihood of one design row: each node factor is weighted by
/// `(1 - u_j)` and uses the blended mean `(1 - u_j) * mech + u_j * s_j`.
/// At hard masks this equals the interventional log-likelihood.
#[inline]
fn masked_ll(theta: &Flat, y: &[f64], u: &[f64], s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..theta.d {
        let w = 1.0 - u[j];
        if w == 0.0 {
            continue;
        }
        let mech = theta.mech_mean(j, y);
        let mu = w * mech + u[j] * s[j];
        let r = y[j] - mu;
        acc += w * (-0.5) * (r * r * theta.inv_var[j] + theta.ln_var[j] + LN_2PI);
    }
    acc
}

/// Adjoint accumulation for one design row with coefficient `coeff`:
/// d(coeff * masked_ll)/d(y, u, s) added into the accumulators.
fn masked_ll_adjoint(
    theta: &Flat,
    y: &[f64],
    u: &[f64],
    s: &[f64],
    coeff: f64,
    adj_y: &mut [f64],
    adj_u: &mut [f64],
    adj_s: &mut [f64],
) {
    for j in 0..theta.d {
        let w = 1.0 - u[j];
        let mech = theta.mech_mean(j, y);
        let mu = w * mech + u[j] * s[j];
        let r = y[j] - mu;
        let g_mu = r * theta.inv_var[j]; // d(logpdf)/d(mu)
        let phi = -0.5 * (r * r * theta.inv_var[j] + theta.ln_var[j] + LN_2PI);
        // factor is w * phi with mu depending on u through the blend
        adj_u[j] += coeff * (-phi + w * g_mu * (s[j] - mech));
        adj_s[j] += coeff * (w * g_mu * u[j]);
        adj_y[j] += coeff * (-w * g_mu);
        if w != 0.0 {
            let (lo, hi) = (theta.parent_off[j] as usize, theta.parent_off[j + 1] as usize);
            for k in lo..hi {
                adj_y[theta.parent_idx[k] as usize] += coeff * (w * w * g_mu * theta.parent_w[k]);
            }
        }
    }
}

/// Reverse sweep through the blended simulation: the outcome adjoint feeds
/// the states (through the mask), the masks (state-versus-mechanism
/// contrast), and the parents (mechanism path).
fn sim_vjp(
    theta: &Flat,
    masks: &[f64],
    states: &[f64],
    base: &[f64],
    adj_y: &mut [f64],
    adj_u: &mut [f64],
    adj_s: &mut [f64],
) {
    for &jv in theta.topo.iter().rev() {
        let j = jv as usize;
        let a = adj_y[j];
        if a == 0.0 {
            continue;
        }
        let u = masks[j];
        adj_u[j] += a * (states[j] - base[j]);
        if u != 0.0 {
            adj_s[j] += a * u;
        }
        if u != 1.0 {
            let w = (1.0 - u) * a;
            let (lo, hi) = (theta.parent_off[j] as usize, theta.parent_off[j + 1] as usize);
            for k in lo..hi {
                adj_y[theta.parent_idx[k] as usize] += theta.parent_w[k] * w;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// NMC

/// Batch masked log-likelihood of the outcome rows under group `g`.
#[inline]
fn batch_ll(
    programs: &QuadPrograms,
    g: usize,
    b: usize,
    d: usize,
    y: &[f64],
    zbuf: &[f64],
) -> f64 {
    (0..b)
        .map(|row| {
            programs.ll(g, row, &zbuf[row * programs.stride..(row + 1) * programs.stride], &y[row * d..(row + 1) * d])
        })
        .sum()
}

/// Fills the product buffer for every row of one outcome matrix.
#[inline]
fn fill_products(programs: &QuadPrograms, d: usize, b: usize, y: &[f64], zbuf: &mut [f64]) {
    for row in 0..b {
        QuadPrograms::products(
            d,
            &y[row * d..(row + 1) * d],
            &mut zbuf[row * programs.stride..(row + 1) * programs.stride],
        );
    }
}

struct CoreOut {
    value: f64,
    adj_mask: Vec<Vec<f64>>,
    grad_states: Vec<Vec<f64>>,
    finite: bool,
    max_term: f64,
}

/// Adjoint contributions with absolute coefficients below this are skipped;
/// the induced gradient perturbation is far below the finite-difference
/// tolerances checked in tests. Exact cancellations (coefficient 0) skip
/// through the same gate, keeping degenerate posteriors at exactly zero.
const COEFF_ABS_SKIP: f64 = 1e-12;

/// Shifted exponentials below exp(-45) are dropped from log-sum-exp
/// accumulations (relative contribution under 3e-20 per term).
const EXP_CUT: f64 = -45.0;

#[inline]
fn shifted_exp(x: f64, max: f64) -> f64 {
    let t = x - max;
    if t < EXP_CUT {
        0.0
    } else {
        t.exp()
    }
}

fn nmc_core(
    set: &ParticleSet,
    cfg: &NmcConfig,
    plan: &NmcPlan,
    eval: &DesignEval,
    want_grads: bool,
) -> CoreOut {
    let b = eval.masks.len();
    let d = set.d();
    let n_outer = plan.outer_idx.len();
    // pool identical particles: contrastive coefficients then aggregate per
    // distinct atom, and a single-support posterior cancels exactly
    let groups = dedup_particles(set);
    let flats: Vec<Flat> = groups.rep.iter().map(|&i| Flat::new(&set.particles()[i])).collect();
    let cum = set.cumulative_weights();

    let inv_n = 1.0 / n_outer as f64;
    let mut scaled_terms = Vec::with_capacity(n_outer);
    let mut adj_mask = vec![vec![0.0; d]; b];
    let mut grad_states = vec![vec![0.0; d]; b];
    let mut finite = true;
    let mut max_term = f64::NEG_INFINITY;

    let mut y = vec![0.0; b * d];
    let mut base = vec![0.0; b * d];
    let mut contrast_idx: Vec<usize> = Vec::new();
    let mut adj_y = vec![0.0; b * d];
    // per-outer draw counts per distinct atom; repeated draws of the same
    // atom cost one likelihood evaluation, and aggregated coefficients
    // cancel exactly when the numerator atom carries all the softmax mass
    let mut draw_count = vec![0.0; flats.len()];
    let mut ll_cache = vec![0.0; flats.len()];
    let mut touched: Vec<usize> = Vec::new();
    let programs = QuadPrograms::build(&flats, eval, d);
    let mut zbuf = vec![0.0; b * programs.stride];

    for (i, &theta0_idx) in plan.outer_idx.iter().enumerate() {
        let theta0_group = groups.group_of[theta0_idx];
        let theta0 = &flats[theta0_group];
        for row in 0..b {
            let z = &plan.z[(i * b + row) * d..(i * b + row + 1) * d];
            simulate(
                theta0,
                &eval.masks[row],
                &eval.states[row],
                z,
                &mut y[row * d..(row + 1) * d],
                &mut base[row * d..(row + 1) * d],
            );
        }
        fill_products(&programs, d, b, &y, &mut zbuf);
        let ll0 = batch_ll(&programs, theta0_group, b, d, &y, &zbuf);

        contrast_idx.clear();
        match &plan.contrastive {
            Contrastive::Seeds(seeds) => {
                let mut sub = rng::stream(seeds[i]);
                for _ in 0..cfg.l {
                    contrast_idx.push(groups.group_of[draw_weighted_index(&cum, &mut sub)]);
                }
            }
            Contrastive::Explicit(lists) => {
                contrast_idx.extend(lists[i].iter().map(|&ci| groups.group_of[ci]));
            }
        }
        if cfg.include_outer_in_contrastive {
            contrast_idx.push(theta0_group);
        }

        // the numerator atom is tracked even when never drawn (count 0)
        touched.clear();
        touched.push(theta0_group);
        ll_cache[theta0_group] = ll0;
        for &cg in &contrast_idx {
            if cg != theta0_group && draw_count[cg] == 0.0 {
                touched.push(cg);
                ll_cache[cg] = batch_ll(&programs, cg, b, d, &y, &zbuf);
            }
            draw_count[cg] += 1.0;
        }

        let count = contrast_idx.len() as f64;
        let mut max = f64::NEG_INFINITY;
        for &cg in &touched {
            if draw_count[cg] > 0.0 && ll_cache[cg] > max {
                max = ll_cache[cg];
            }
        }
        finite &= ll0.is_finite() && max.is_finite();
        let mut sum = 0.0;
        for &cg in &touched {
            if draw_count[cg] > 0.0 {
                sum += draw_count[cg] * shifted_exp(ll_cache[cg], max);
            }
        }
        let term = (ll0 - max) - sum.ln() + count.ln();
        if term > max_term {
            max_term = term;
        }
        scaled_terms.push(inv_n * term);

        if want_grads {
            adj_y.iter_mut().for_each(|v| *v = 0.0);
            for &idx in &touched {
                let q = if draw_count[idx] > 0.0 {
                    draw_count[idx] * shifted_exp(ll_cache[idx], max) / sum
                } else {
                    0.0
                };
                let mut coeff = -(inv_n * q);
                if idx == theta0_group {
                    coeff += inv_n;
                }
                if coeff.abs() < COEFF_ABS_SKIP {
                    continue;
                }
                let theta = &flats[idx];
                for row in 0..b {
                    let yr = &y[row * d..(row + 1) * d];
                    masked_ll_adjoint(
                        theta,
                        yr,
                        &eval.masks[row],
                        &eval.states[row],
                        coeff,
                        &mut adj_y[row * d..(row + 1) * d],
                        &mut adj_mask[row],
                        &mut grad_states[row],
                    );
                }
            }
            for row in 0..b {
                sim_vjp(
                    theta0,
                    &eval.masks[row],
                    &eval.states[row],
                    &base[row * d..(row + 1) * d],
                    &mut adj_y[row * d..(row + 1) * d],
                    &mut adj_mask[row],
                    &mut grad_states[row],
                );
            }
        }
        for &cg in &touched {
            draw_count[cg] = 0.0;
        }
    }

    CoreOut { value: pairwise_sum(&scaled_terms), adj_mask, grad_states, finite, max_term }
}

/// NMC value at an explicit design evaluation point (no gradients). Used by
/// the grid evaluator and finite-difference checks.
pub fn nmc_value(set: &ParticleSet, cfg: &NmcConfig, plan: &NmcPlan, eval: &DesignEval) -> f64 {
    nmc_core(set, cfg, plan, eval, false).value
}

/// NMC estimate for a relaxed policy sample under a frozen plan (common
/// random numbers). Straight-through: the reported value is the objective at
/// the hard design sample; gradients are the objective's derivatives at the
/// soft masks, chained through the relaxation into the logits.
pub fn nmc_with_plan(
    set: &ParticleSet,
    params: &PolicyParams,
    noise: &RelaxNoise,
    cfg: &NmcConfig,
    plan: &NmcPlan,
) -> EigEstimate {
    let relaxed = relax_with_noise(params, noise);
    let masks = hard_masks(&relaxed);
    let hard_eval = DesignEval { masks: &masks, states: &params.state_values };
    let value_core = nmc_core(set, cfg, plan, &hard_eval, false);
    let soft_eval =
        DesignEval { masks: &relaxed.soft_targets, states: &params.state_values };
    let grad_core = nmc_core(set, cfg, plan, &soft_eval, true);
    let grad_target_logits = relax_vjp(params, noise, &grad_core.adj_mask);
    EigEstimate {
        value: value_core.value,
        grad_target_logits,
        grad_state_values: grad_core.grad_states,
        diagnostics: Diagnostics {
            ess: None,
            n_outer: plan.outer_idx.len(),
            l: cfg.l,
            invalid: !(value_core.finite && grad_core.finite),
            low_ess: false,
            max_term: value_core.max_term,
        },
    }
}

/// Nested Monte Carlo estimate of the batch EIG: outer and contrastive
/// particles are resampled from the weighted set, outcomes are simulated
/// under the hard design, and each term contrasts the generating particle
/// against the contrastive average.
pub fn nmc(
    set: &ParticleSet,
    params: &PolicyParams,
    noise: &RelaxNoise,
    cfg: &NmcConfig,
    rng: &mut RngStream,
) -> EigEstimate {
    let plan = draw_nmc_plan(set, cfg, params.batch_size(), rng);
    nmc_with_plan(set, params, noise, cfg, &plan)
}

// ---------------------------------------------------------------------------
// IWNMC

/// Deduplicated view of the particle set: identical particles are pooled so
/// the pairwise likelihood pass scales with the number of distinct atoms.
struct Groups {
    rep: Vec<usize>,       // representative particle index per group
    count: Vec<f64>,       // multiplicity per group
    group_of: Vec<usize>,  // group of each particle
}

fn dedup_particles(set: &ParticleSet) -> Groups {
    use std::collections::HashMap;
    let mut key_to_group: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut rep = Vec::new();
    let mut count: Vec<f64> = Vec::new();
    let mut group_of = Vec::with_capacity(set.len());
    for (idx, scm) in set.particles().iter().enumerate() {
        let mut key = Vec::new();
        key.extend_from_slice(&(scm.d() as u64).to_le_bytes());
        for &(i, j) in scm.dag().edges() {
            key.extend_from_slice(&(i as u32).to_le_bytes());
            key.extend_from_slice(&(j as u32).to_le_bytes());
            key.extend_from_slice(&scm.weights()[i][j].to_le_bytes());
        }
        for &v in scm.noise_vars() {
            key.extend_from_slice(&v.to_le_bytes());
        }
        let g = *key_to_group.entry(key).or_insert_with(|| {
            rep.push(idx);
            count.push(0.0);
            rep.len() - 1
        });
        count[g] += 1.0;
        group_of.push(g);
    }
    Groups { rep, count, group_of }
}

/// Outer-term weights below this threshold are skipped entirely.
const WEIGHT_SKIP: f64 = 1e-16;

fn iwnmc_core(
    set: &ParticleSet,
    plan: &IwnmcPlan,
    eval: &DesignEval,
    want_grads: bool,
) -> CoreOut {
    let log_hist = set.log_hist_lik().expect("iwnmc requires history log-likelihoods");
    let b = eval.masks.len();
    let d = set.d();
    let l = set.len();
    let groups = dedup_particles(set);
    let n_groups = groups.rep.len();
    let flats: Vec<Flat> = groups.rep.iter().map(|&i| Flat::new(&set.particles()[i])).collect();
    let group_logh: Vec<f64> = groups.rep.iter().map(|&i| log_hist[i]).collect();
    let weights = set.weights();

    let mut scaled_terms = Vec::with_capacity(l);
    let mut adj_mask = vec![vec![0.0; d]; b];
    let mut grad_states = vec![vec![0.0; d]; b];
    let mut finite = true;
    let mut max_term = f64::NEG_INFINITY;

    let mut y = vec![0.0; b * d];
    let mut base = vec![0.0; b * d];
    let mut ll_row = vec![0.0; n_groups];
    let mut terms = vec![0.0; n_groups];
    let mut counts_eff = vec![0.0; n_groups];
    let mut exps = vec![0.0; n_groups];
    let mut adj_y = vec![0.0; b * d];
    let programs = QuadPrograms::build(&flats, eval, d);
    let stride = programs.stride;
    let mut zbuf = vec![0.0; b * stride];
    // aggregation buffers for the fast adjoint path
    let adj_prog = if want_grads { Some(AdjointPrograms::build(&flats, eval, d)) } else { None };
    let mut z_agg = vec![0.0; if adj_prog.is_some() { n_groups * b * stride } else { 0 }];
    let mut y_agg = vec![0.0; if adj_prog.is_some() { n_groups * b * d } else { 0 }];
    let mut c_agg = vec![0.0; if adj_prog.is_some() { n_groups * b } else { 0 }];
    let mut m_agg = vec![0.0; if adj_prog.is_some() { b * stride } else { 0 }];
    let mut l_agg = vec![0.0; if adj_prog.is_some() { b * d } else { 0 }];

    for m in 0..l {
        let w_m = weights[m];
        if w_m <= WEIGHT_SKIP {
            scaled_terms.push(0.0);
            continue;
        }
        let own_group = groups.group_of[m];
        let theta_m = &flats[own_group];
        for row in 0..b {
            let z = &plan.z[(m * b + row) * d..(m * b + row + 1) * d];
            simulate(
                theta_m,
                &eval.masks[row],
                &eval.states[row],
                z,
                &mut y[row * d..(row + 1) * d],
                &mut base[row * d..(row + 1) * d],
            );
        }
        fill_products(&programs, d, b, &y, &mut zbuf);
        for g in 0..n_groups {
            ll_row[g] = batch_ll(&programs, g, b, d, &y, &zbuf);
        }
        let ll_own = ll_row[own_group];

        // leave-one-out contrastive sum over the other L-1 particles, pooled
        // by distinct atoms, in log space
        let mut max = f64::NEG_INFINITY;
        for g in 0..n_groups {
            counts_eff[g] = groups.count[g] - if g == own_group { 1.0 } else { 0.0 };
            terms[g] = ll_row[g] + group_logh[g];
            if counts_eff[g] > 0.0 && terms[g] > max {
                max = terms[g];
            }
        }
        finite &= ll_own.is_finite() && max.is_finite();
        let mut sum = 0.0;
        for g in 0..n_groups {
            if counts_eff[g] > 0.0 {
                exps[g] = shifted_exp(terms[g], max);
                sum += counts_eff[g] * exps[g];
            } else {
                exps[g] = 0.0;
            }
        }
        let count = (l - 1) as f64;
        let term = (ll_own - max) - sum.ln() + count.ln();
        if term > max_term {
            max_term = term;
        }
        scaled_terms.push(w_m * term);

        if want_grads {
            adj_y.iter_mut().for_each(|v| *v = 0.0);
            m_agg.iter_mut().for_each(|v| *v = 0.0);
            l_agg.iter_mut().for_each(|v| *v = 0.0);
            for g in 0..n_groups {
                let q = counts_eff[g] * exps[g] / sum;
                let mut coeff = -(w_m * q);
                if g == own_group {
                    coeff += w_m;
                }
                if coeff.abs() < COEFF_ABS_SKIP {
                    continue;
                }
                for row in 0..b {
                    let za = &mut z_agg[(g * b + row) * stride..][..stride];
                    let zr = &zbuf[row * stride..(row + 1) * stride];
                    for k in 0..stride {
                        za[k] += coeff * zr[k];
                    }
                    let ya = &mut y_agg[(g * b + row) * d..][..d];
                    let yr = &y[row * d..(row + 1) * d];
                    for p in 0..d {
                        ya[p] += coeff * yr[p];
                    }
                    c_agg[g * b + row] += coeff;
                    let ma = &mut m_agg[row * stride..(row + 1) * stride];
                    let pg = &programs.packed[(g * b + row) * stride..][..stride];
                    for k in 0..stride {
                        ma[k] += coeff * pg[k];
                    }
                    let la = &mut l_agg[row * d..(row + 1) * d];
                    let lg = &programs.linear[(g * b + row) * d..][..d];
                    for p in 0..d {
                        la[p] += coeff * lg[p];
                    }
                }
            }
            for row in 0..b {
                quad_grad(
                    &m_agg[row * stride..(row + 1) * stride],
                    d,
                    &y[row * d..(row + 1) * d],
                    &mut adj_y[row * d..(row + 1) * d],
                );
                for p in 0..d {
                    adj_y[row * d + p] += l_agg[row * d + p];
                }
            }
            for row in 0..b {
                sim_vjp(
                    theta_m,
                    &eval.masks[row],
                    &eval.states[row],
                    &base[row * d..(row + 1) * d],
                    &mut adj_y[row * d..(row + 1) * d],
                    &mut adj_mask[row],
                    &mut grad_states[row],
                );
            }
        }
    }

    if let Some(ap) = &adj_prog {
        ap.finish(&z_agg, &y_agg, &c_agg, n_groups, &mut adj_mask, &mut grad_states);
    }

    CoreOut { value: pairwise_sum(&scaled_terms), adj_mask, grad_states, finite, max_term }
}

/// IWNMC value at an explicit design evaluation point (no gradients).
pub fn iwnmc_value(set: &ParticleSet, plan: &IwnmcPlan, eval: &DesignEval) -> f64 {
    iwnmc_core(set, plan, eval, false).value
}

/// IWNMC estimate under a frozen plan. Straight-through as in
/// [`nmc_with_plan`]: hard value, soft-mask gradients.
pub fn iwnmc_with_plan(
    set: &ParticleSet,
    params: &PolicyParams,
    noise: &RelaxNoise,
    cfg: &IwnmcConfig,
    plan: &IwnmcPlan,
) -> EigEstimate {
    let relaxed = relax_with_noise(params, noise);
    let masks = hard_masks(&relaxed);
    let hard_eval = DesignEval { masks: &masks, states: &params.state_values };
    let value_core = iwnmc_core(set, plan, &hard_eval, false);
    let soft_eval =
        DesignEval { masks: &relaxed.soft_targets, states: &params.state_values };
    let grad_core = iwnmc_core(set, plan, &soft_eval, true);
    let ess = effective_sample_size(set);
    EigEstimate {
        value: value_core.value,
        grad_target_logits: relax_vjp(params, noise, &grad_core.adj_mask),
        grad_state_values: grad_core.grad_states,
        diagnostics: Diagnostics {
            ess: Some(ess),
            n_outer: set.len(),
            l: set.len().saturating_sub(1),
            invalid: !(value_core.finite && grad_core.finite),
            low_ess: ess < cfg.ess_floor,
            max_term: value_core.max_term,
        },
    }
}

/// Importance-weighted NMC: particles come from a prior or proposal and are
/// reweighted by their history likelihoods (self-normalized). Each particle
/// in turn generates outcomes and is contrasted against the remaining
/// particles in a leave-one-out fashion, with history likelihoods inside the
/// contrastive average.
pub fn iwnmc(
    set: &ParticleSet,
    params: &PolicyParams,
    noise: &RelaxNoise,
    cfg: &IwnmcConfig,
    rng: &mut RngStream,
) -> EigEstimate {
    let plan = draw_iwnmc_plan(set.len(), params.batch_size(), set.d(), rng);
    iwnmc_with_plan(set, params, noise, cfg, &plan)
}

// ---------------------------------------------------------------------------
// landscape grid

#[derive(Debug, Clone, PartialEq)]
pub struct EigGridPoint {
    pub targets: Vec<usize>,
    pub states: Vec<f64>,
    pub value: f64,
}

/// Evaluates the NMC objective over a grid of fixed single-target designs:
/// every target tuple (one target per design in the batch) crossed with the
/// state axis in every design slot. One frozen plan is shared across all
/// cells (common random numbers), so the landscape is smooth in the grid.
pub fn eig_grid(
    set: &ParticleSet,
    target_tuples: &[Vec<usize>],
    state_axis: &[f64],
    cfg: &NmcConfig,
    rng: &mut RngStream,
) -> Vec<EigGridPoint> {
    let d = set.d();
    let mut out = Vec::new();
    if target_tuples.is_empty() || state_axis.is_empty() {
        return out;
    }
    let b = target_tuples[0].len();
    let plan = draw_nmc_plan(set, cfg, b, rng);
    let n_states = state_axis.len();
    let cells = n_states.pow(b as u32);
    for targets in target_tuples {
        assert_eq!(targets.len(), b, "all target tuples must have the batch length");
        let mut masks = vec![vec![0.0; d]; b];
        for (row, &t) in targets.iter().enumerate() {
            masks[row][t] = 1.0;
        }
        for cell in 0..cells {
            let mut states = vec![vec![0.0; d]; b];
            let mut point_states = Vec::with_capacity(b);
            let mut rem = cell;
            for row in 0..b {
                let s = state_axis[rem % n_states];
                rem /= n_states;
                states[row][targets[row]] = s;
                point_states.push(s);
            }
            let eval = DesignEval { masks: &masks, states: &states };
            let value = nmc_value(set, cfg, &plan, &eval);
            out.push(EigGridPoint { targets: targets.clone(), states: point_states, value });
        }
    }
    out
}
