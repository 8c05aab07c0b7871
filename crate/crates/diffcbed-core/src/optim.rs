//! First-order ascent over policy parameters.
//!
//! The estimator modules produce exact gradients of the implemented
//! computation by hand-derived chain rule; this module provides the Adam
//! update, the optimization loop, and the finite-difference harness that
//! validates the gradients under common random numbers.

use crate::error::{Error, Result};
use crate::estimator::{
    draw_iwnmc_plan, draw_nmc_plan, iwnmc_value, iwnmc_with_plan, nmc_value,
    nmc_with_plan, DesignEval, EigEstimate, IwnmcConfig, IwnmcPlan, NmcConfig, NmcPlan,
};
use crate::math::{pairwise_mean, zeros};
use crate::policy::{
    anneal_temperature, clip_states, draw_relax_noise, relax_with_noise, PolicyParams, RelaxNoise,
    TempSchedule,
};
use crate::posterior::ParticleSet;
use crate::rng::RngStream;

/// Adam hyperparameters (learning rate per the reference configuration,
/// conventional moment decays).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moment estimates for both policy parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_logits: Vec<Vec<f64>>,
    pub second_logits: Vec<Vec<f64>>,
    pub first_states: Vec<Vec<f64>>,
    pub second_states: Vec<Vec<f64>>,
    pub step_count: usize,
    pub cfg: AdamConfig,
}

impl OptimizerState {
    pub fn new(b: usize, d: usize, cfg: AdamConfig) -> Self {
        OptimizerState {
            first_logits: zeros(b, d),
            second_logits: zeros(b, d),
            first_states: zeros(b, d),
            second_states: zeros(b, d),
            step_count: 0,
            cfg,
        }
    }
}

fn adam_update(
    p: &mut [Vec<f64>],
    g: &[Vec<f64>],
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    cfg: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for r in 0..p.len() {
        for c in 0..p[r].len() {
            let grad = g[r][c];
            m[r][c] = cfg.beta1 * m[r][c] + (1.0 - cfg.beta1) * grad;
            v[r][c] = cfg.beta2 * v[r][c] + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = m[r][c] / bc1;
            let v_hat = v[r][c] / bc2;
            // ascent: maximize the objective
            p[r][c] += cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// One bias-corrected Adam ascent step over both parameter matrices.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut PolicyParams,
    grad_logits: &[Vec<f64>],
    grad_states: &[Vec<f64>],
) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.cfg.beta1.powi(t);
    let bc2 = 1.0 - state.cfg.beta2.powi(t);
    let cfg = state.cfg;
    adam_update(
        &mut params.target_logits,
        grad_logits,
        &mut state.first_logits,
        &mut state.second_logits,
        &cfg,
        bc1,
        bc2,
    );
    adam_update(
        &mut params.state_values,
        grad_states,
        &mut state.first_states,
        &mut state.second_states,
        &cfg,
        bc1,
        bc2,
    );
}

/// Frozen simulation noise shared by the policy samples of one step.
#[derive(Debug, Clone)]
pub enum SimPlan {
    Nmc(NmcPlan),
    Iwnmc(IwnmcPlan),
    /// No simulation noise (deterministic test objectives).
    None,
}

/// An objective over policy parameters that can be evaluated with gradients
/// under frozen noise, and re-evaluated (value only) at shifted design
/// points for finite-difference checks.
pub trait PolicyObjective {
    fn draw_sim_plan(&self, batch_size: usize, rng: &mut RngStream) -> SimPlan;
    fn estimate(&self, params: &PolicyParams, sim: &SimPlan, relax: &RelaxNoise) -> EigEstimate;
    fn value_at(&self, sim: &SimPlan, eval: &DesignEval) -> f64;
    /// ESS diagnostic when the objective carries weighted particles.
    fn ess(&self) -> Option<f64> {
        None
    }
}

/// NMC objective over a weighted posterior particle set.
pub struct NmcObjective<'a> {
    pub set: &'a ParticleSet,
    pub cfg: NmcConfig,
}

impl PolicyObjective for NmcObjective<'_> {
    fn draw_sim_plan(&self, batch_size: usize, rng: &mut RngStream) -> SimPlan {
        SimPlan::Nmc(draw_nmc_plan(self.set, &self.cfg, batch_size, rng))
    }

    fn estimate(&self, params: &PolicyParams, sim: &SimPlan, relax: &RelaxNoise) -> EigEstimate {
        match sim {
            SimPlan::Nmc(plan) => nmc_with_plan(self.set, params, relax, &self.cfg, plan),
            _ => panic!("NMC objective requires an NMC plan"),
        }
    }

    fn value_at(&self, sim: &SimPlan, eval: &DesignEval) -> f64 {
        match sim {
            SimPlan::Nmc(plan) => nmc_value(self.set, &self.cfg, plan, eval),
            _ => panic!("NMC objective requires an NMC plan"),
        }
    }
}

/// IWNMC objective over history-weighted prior or proposal particles.
pub struct IwnmcObjective<'a> {
    pub set: &'a ParticleSet,
    pub cfg: IwnmcConfig,
}

impl PolicyObjective for IwnmcObjective<'_> {
    fn draw_sim_plan(&self, batch_size: usize, rng: &mut RngStream) -> SimPlan {
        SimPlan::Iwnmc(draw_iwnmc_plan(self.set.len(), batch_size, self.set.d(), rng))
    }

    fn estimate(&self, params: &PolicyParams, sim: &SimPlan, relax: &RelaxNoise) -> EigEstimate {
        match sim {
            SimPlan::Iwnmc(plan) => iwnmc_with_plan(self.set, params, relax, &self.cfg, plan),
            _ => panic!("IWNMC objective requires an IWNMC plan"),
        }
    }

    fn value_at(&self, sim: &SimPlan, eval: &DesignEval) -> f64 {
        match sim {
            SimPlan::Iwnmc(plan) => iwnmc_value(self.set, plan, eval),
            _ => panic!("IWNMC objective requires an IWNMC plan"),
        }
    }

    fn ess(&self) -> Option<f64> {
        Some(crate::posterior::effective_sample_size(self.set))
    }
}

/// Evaluates the objective and validates the result; a non-finite value or
/// gradient aborts the step.
pub fn evaluate_with_gradients(
    objective: &dyn PolicyObjective,
    params: &PolicyParams,
    sim: &SimPlan,
    relax: &RelaxNoise,
) -> Result<EigEstimate> {
    let est = objective.estimate(params, sim, relax);
    if est.diagnostics.invalid || !est.all_finite() {
        return Err(Error::NonFinite("objective gradient evaluation".into()));
    }
    Ok(est)
}

/// Per-step optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub eig_value: f64,
    pub temperature: f64,
    pub ess: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    /// Update steps C.
    pub steps: usize,
    /// Policy samples averaged per step O.
    pub samples_per_step: usize,
    pub adam: AdamConfig,
    pub schedule: TempSchedule,
    /// States are clamped into this range after every step.
    pub state_bounds: (f64, f64),
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            steps: 100,
            samples_per_step: 16,
            adam: AdamConfig::default(),
            schedule: TempSchedule::default(),
            state_bounds: (-10.0, 10.0),
        }
    }
}

/// Runs `steps` ascent steps, each averaging value and gradients over
/// `samples_per_step` policy samples drawn with fresh relaxation noise but a
/// shared simulation plan (common random numbers within the step).
pub fn optimize_policy(
    objective: &dyn PolicyObjective,
    mut params: PolicyParams,
    cfg: &OptimizeConfig,
    rng: &mut RngStream,
) -> Result<(PolicyParams, Vec<TraceRow>)> {
    let (b, d) = (params.batch_size(), params.d());
    let mut state = OptimizerState::new(b, d, cfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps);
    let denom = cfg.steps.saturating_sub(1).max(1);
    for step in 0..cfg.steps {
        params.temperature = anneal_temperature(cfg.schedule, step, denom);
        let sim = objective.draw_sim_plan(b, rng);
        let mut values = Vec::with_capacity(cfg.samples_per_step);
        let mut g_logits = zeros(b, d);
        let mut g_states = zeros(b, d);
        let mut ess = None;
        for _ in 0..cfg.samples_per_step {
            let relax = draw_relax_noise(params.mode, b, d, rng);
            let est = evaluate_with_gradients(objective, &params, &sim, &relax)?;
            values.push(est.value);
            for r in 0..b {
                for c in 0..d {
                    g_logits[r][c] += est.grad_target_logits[r][c];
                    g_states[r][c] += est.grad_state_values[r][c];
                }
            }
            ess = est.diagnostics.ess.or(ess);
        }
        let scale = 1.0 / cfg.samples_per_step as f64;
        for r in 0..b {
            for c in 0..d {
                g_logits[r][c] *= scale;
                g_states[r][c] *= scale;
            }
        }
        let grad_norm = (g_logits
            .iter()
            .flatten()
            .chain(g_states.iter().flatten())
            .map(|g| g * g)
            .sum::<f64>())
        .sqrt();
        adam_step(&mut state, &mut params, &g_logits, &g_states);
        clip_states(&mut params, cfg.state_bounds.0, cfg.state_bounds.1);
        trace.push(TraceRow {
            step,
            eig_value: pairwise_mean(&values),
            temperature: params.temperature,
            ess,
            grad_norm,
        });
    }
    Ok((params, trace))
}

/// Worst relative disagreement between analytic gradients and central
/// finite differences, per parameter family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_state: f64,
    pub max_rel_logit: f64,
}

/// Central finite differences with common random numbers.
///
/// Gradients are evaluated at the soft masks (the straight-through path), so
/// both check families differentiate the objective there: state coordinates
/// perturb the state matrix at the frozen soft masks; logit coordinates move
/// the soft masks themselves through the relaxation with frozen noise.
pub fn finite_difference_check(
    objective: &dyn PolicyObjective,
    params: &PolicyParams,
    sim: &SimPlan,
    relax: &RelaxNoise,
    h: f64,
) -> GradCheck {
    let est = objective.estimate(params, sim, relax);
    let relaxed = relax_with_noise(params, relax);
    let soft0 = &relaxed.soft_targets;
    let (b, d) = (params.batch_size(), params.d());

    let rel_err = |g: f64, fd: f64| -> f64 {
        let denom = g.abs().max(fd.abs());
        if denom < 1e-7 {
            0.0
        } else {
            (g - fd).abs() / denom
        }
    };

    let mut max_rel_state: f64 = 0.0;
    for row in 0..b {
        for col in 0..d {
            let mut up = params.state_values.clone();
            up[row][col] += h;
            let mut dn = params.state_values.clone();
            dn[row][col] -= h;
            let f_up = objective.value_at(sim, &DesignEval { masks: soft0, states: &up });
            let f_dn = objective.value_at(sim, &DesignEval { masks: soft0, states: &dn });
            let fd = (f_up - f_dn) / (2.0 * h);
            max_rel_state = max_rel_state.max(rel_err(est.grad_state_values[row][col], fd));
        }
    }

    let mut max_rel_logit: f64 = 0.0;
    for row in 0..b {
        for col in 0..d {
            let soft_at = |delta: f64| -> Vec<Vec<f64>> {
                let mut p = params.clone();
                p.target_logits[row][col] += delta;
                relax_with_noise(&p, relax).soft_targets
            };
            let m_up = soft_at(h);
            let m_dn = soft_at(-h);
            let f_up =
                objective.value_at(sim, &DesignEval { masks: &m_up, states: &params.state_values });
            let f_dn =
                objective.value_at(sim, &DesignEval { masks: &m_dn, states: &params.state_values });
            let fd = (f_up - f_dn) / (2.0 * h);
            max_rel_logit = max_rel_logit.max(rel_err(est.grad_target_logits[row][col], fd));
        }
    }

    GradCheck { max_rel_state, max_rel_logit }
}
