//! Single-loop and double-loop actor-critic runs with full per-iteration
//! bookkeeping.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actor::{mirror_step, ActorConfig};
use crate::critic::{approx_q_and_advantage, build_certificate, CriticState, FeatureMap, Projector, SemiGradientOperator, StepSizeCertificate};
use crate::error::{Error, Result};
use crate::mdp::{validate_mdp, FiniteMdp};
use crate::oracle::{evaluate_policy, solve_optimal, state_action_occupancy, OPTIMAL_TOL};
use crate::policy::{kl_divergences, log_density, PolicyLogits};

/// Iterates larger than this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Floor applied to a computed schedule constant.
pub const MIN_SCHEDULE_CONSTANT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    SingleLoop,
    ConstantM { m: usize },
    Logarithmic { c: f64 },
    Linear { c: f64 },
}

impl ScheduleKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScheduleKind::SingleLoop => Ok(()),
            ScheduleKind::ConstantM { m } if m >= 1 => Ok(()),
            ScheduleKind::ConstantM { m } => Err(Error::InvalidArgument(format!("constant M must be >= 1, got {m}"))),
            ScheduleKind::Logarithmic { c } | ScheduleKind::Linear { c } if c > 0.0 && c.is_finite() => Ok(()),
            ScheduleKind::Logarithmic { c } | ScheduleKind::Linear { c } => {
                Err(Error::InvalidArgument(format!("schedule constant c must be positive, got {c}")))
            }
        }
    }

    pub fn is_single_loop(&self) -> bool {
        matches!(self, ScheduleKind::SingleLoop)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::SingleLoop => "single_loop",
            ScheduleKind::ConstantM { .. } => "constant_m",
            ScheduleKind::Logarithmic { .. } => "logarithmic",
            ScheduleKind::Linear { .. } => "linear",
        }
    }
}

/// Smallest integer not below `x`, ignoring round-off just above an integer.
fn ceil_guarded(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Number of inner TD steps at outer iteration `n`.
pub fn m_schedule(kind: ScheduleKind, n: usize, h: f64, gamma_const: f64) -> Result<usize> {
    kind.validate()?;
    let hg = h * gamma_const;
    if !(hg > 0.0) {
        return Err(Error::InvalidArgument(format!("h * Gamma must be positive, got {hg}")));
    }
    let raw = match kind {
        ScheduleKind::SingleLoop => return Ok(1),
        ScheduleKind::ConstantM { m } => return Ok(m),
        ScheduleKind::Logarithmic { c } => 4.0 / hg * (c * (n as f64 + 1.0)).ln(),
        ScheduleKind::Linear { c } => 4.0 * c / hg * (n as f64 + 1.0),
    };
    let m = ceil_guarded(raw).max(1.0);
    if m > usize::MAX as f64 {
        return Err(Error::InvalidArgument(format!("M({n}) = {m:e} is not representable")));
    }
    Ok(m as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConstant {
    /// `max(c_raw, MIN_SCHEDULE_CONSTANT)`.
    pub c: f64,
    /// `sqrt(8 c(gamma) delta2 / tau)`.
    pub c_raw: f64,
    /// `max{1, 2 gamma / (1 - gamma)}`.
    pub c_gamma: f64,
    pub delta1: f64,
    pub delta2: f64,
}

/// Constant `c` of the logarithmic schedule that keeps the log-densities bounded.
pub fn schedule_constant(
    mdp: &FiniteMdp,
    cert: &StepSizeCertificate,
    theta0: &DVector<f64>,
    h: f64,
) -> Result<ScheduleConstant> {
    let g = mdp.gamma;
    let gc = cert.gamma_const;
    let denominator = gc - 3.0 * h * (1.0 + g).powi(2);
    if !(denominator > 0.0) {
        return Err(Error::StepTooLarge { denominator });
    }
    let alpha = (3.0 * h + 2.0 / gc) / denominator;
    let inv = 1.0 / ((1.0 - g) * cert.lambda_beta);
    let c_sup = mdp.cost_sup();
    let delta1 = (theta0.norm_squared() + c_sup * c_sup * alpha).sqrt() + c_sup * inv;
    let delta2 = 2.0 * mdp.tau * g * (alpha.sqrt() + inv);
    let c_gamma = (2.0 * g / (1.0 - g)).max(1.0);
    let c_raw = (8.0 * c_gamma * delta2 / mdp.tau).sqrt();
    Ok(ScheduleConstant { c: c_raw.max(MIN_SCHEDULE_CONSTANT), c_raw, c_gamma, delta1, delta2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub h: f64,
    pub lambda: f64,
    pub n_policy_updates: usize,
    pub schedule: ScheduleKind,
    /// Defaults to zero.
    pub theta0: Option<DVector<f64>>,
    /// Defaults to the reference policy.
    pub pi0: Option<DMatrix<f64>>,
    pub enforce_certificate: bool,
    /// Keep `|theta^{n,k} - theta_pi|` and `|g|^2` for every inner step.
    pub record_inner_errors: bool,
    /// Apply the inner TD steps one at a time even when inner errors are not
    /// recorded. Otherwise long inner loops use the equivalent affine power.
    pub stepwise_inner: bool,
}

impl RunConfig {
    pub fn new(h: f64, lambda: f64, n_policy_updates: usize, schedule: ScheduleKind) -> Self {
        RunConfig {
            h,
            lambda,
            n_policy_updates,
            schedule,
            theta0: None,
            pi0: None,
            enforce_certificate: false,
            record_inner_errors: true,
            stepwise_inner: false,
        }
    }
}

/// One outer iteration `n`: quantities at `(theta^n, pi^n)` and the step to `n + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub k_n: f64,
    pub theta_norm: f64,
    pub l_sup: f64,
    pub v_rho: f64,
    pub gap: f64,
    /// `|theta^{n+1} - theta_{pi^n}|`.
    pub critic_err: f64,
    /// `|theta^n - theta_{pi^n}|`.
    pub critic_err_pre: f64,
    /// `sup_s KL(pi^{n+1} | pi^n)(s)`.
    pub consec_kl: f64,
    pub m_used: usize,
    /// `|theta^{n,k} - theta_{pi^n}|` for `k = 0..=M(n)` (empty when not recorded).
    pub inner_errors: Vec<f64>,
    /// `|g(theta^{n,k}, pi^n)|^2` for `k = 0..M(n)` (empty when not recorded).
    pub inner_grad_sq: Vec<f64>,
    /// `V^{pi^n}(s)`.
    pub v_states: Vec<f64>,
    /// `|Q^{pi^n}|_inf`.
    pub q_sup: f64,
    /// `|Q^{pi^{n+1}} - Q^{pi^n}|_inf`.
    pub q_diff: f64,
    /// `max |<theta_{pi^n}, phi> - Q^{pi^n}|`.
    pub realisability_residual: f64,
}

/// State after the last completed update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSnapshot {
    pub n: usize,
    pub k_n: f64,
    pub theta_norm: f64,
    pub l_sup: f64,
    pub v_rho: f64,
    pub gap: f64,
    pub v_states: Vec<f64>,
    pub theta: Vec<f64>,
    /// Canonical logits (`log dpi/dmu`).
    pub policy_log_density: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub n: usize,
    pub quantity: String,
    #[serde(serialize_with = "crate::ser::float", deserialize_with = "crate::ser::de_float")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub h: f64,
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    /// Timescale ratio `lambda / h`.
    pub eta: f64,
    pub n_policy_updates: usize,
    pub schedule: ScheduleKind,
    pub theta0: Vec<f64>,
    pub pi0: Vec<Vec<f64>>,
    pub v_star: Vec<f64>,
    pub v_star_rho: f64,
    pub optimal_tol: f64,
    pub inner_recorded: bool,
    pub warnings: Vec<String>,
    pub abort: Option<AbortInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub meta: TraceMeta,
    pub records: Vec<IterationRecord>,
    /// `None` only when the run aborted before any update.
    pub final_state: Option<FinalSnapshot>,
}

impl RunTrace {
    pub fn completed(&self) -> bool {
        self.meta.abort.is_none()
    }

    /// `(theta_norm, l_sup, k_n)` at iteration `n`, including the final snapshot.
    pub fn state_at(&self, n: usize) -> Option<(f64, f64, f64)> {
        if let Some(r) = self.records.get(n) {
            return Some((r.theta_norm, r.l_sup, r.k_n));
        }
        self.final_state.as_ref().filter(|f| f.n == n).map(|f| (f.theta_norm, f.l_sup, f.k_n))
    }

    pub fn v_states_at(&self, n: usize) -> Option<&[f64]> {
        if let Some(r) = self.records.get(n) {
            return Some(&r.v_states);
        }
        self.final_state.as_ref().filter(|f| f.n == n).map(|f| f.v_states.as_slice())
    }

    pub fn gap_at(&self, n: usize) -> Option<f64> {
        if let Some(r) = self.records.get(n) {
            return Some(r.gap);
        }
        self.final_state.as_ref().filter(|f| f.n == n).map(|f| f.gap)
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    crate::mdp::matrix_rows(m)
}

fn check_config(mdp: &FiniteMdp, features: &FeatureMap, cert: &StepSizeCertificate, config: &RunConfig) -> Result<()> {
    if !(config.h > 0.0 && config.h.is_finite()) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {}", config.h)));
    }
    config.schedule.validate()?;
    if let Some(t) = &config.theta0 {
        if t.len() != features.dim {
            return Err(Error::Dimension(format!("theta0 has {} entries, features have {}", t.len(), features.dim)));
        }
    }
    if let Some(p) = &config.pi0 {
        if p.shape() != (mdp.n_states, mdp.n_actions) {
            return Err(Error::Dimension(format!("pi0 is {:?}", p.shape())));
        }
    }
    if config.enforce_certificate {
        let flags = cert.evaluate(config.h, config.lambda);
        if !flags.tau_lambda_ok {
            return Err(Error::Precondition(format!("tau*lambda = {} not in (0, 1)", mdp.tau * config.lambda)));
        }
        if config.schedule.is_single_loop() {
            if !(flags.h_single_loop_ok && flags.cond_32gamma) {
                return Err(Error::Precondition(format!(
                    "single-loop stability needs h <= {:e} and 32 gamma^2 / Gamma^2 < 1",
                    cert.h_single_loop
                )));
            }
        } else if !flags.h_double_loop_ok {
            return Err(Error::Precondition(format!("double-loop needs h < {:e}", cert.h_double_loop)));
        }
    }
    Ok(())
}

struct PolicyState {
    policy: PolicyLogits,
    k_n: f64,
    l_sup: f64,
    v: DVector<f64>,
    q: DMatrix<f64>,
}

fn policy_state(mdp: &FiniteMdp, policy: PolicyLogits) -> Result<PolicyState> {
    let (_, stats) = log_density(&policy, &mdp.mu)?;
    let eval = evaluate_policy(mdp, &policy)?;
    Ok(PolicyState { policy, k_n: stats.k_sup, l_sup: stats.sup_norm_l, v: eval.v, q: eval.q })
}

fn first_divergent(n: usize, theta_norm: f64, l_sup: f64) -> Option<AbortInfo> {
    [("theta_norm", theta_norm), ("l_sup", l_sup)]
        .into_iter()
        .find(|(_, v)| !v.is_finite() || *v > DIVERGENCE_LIMIT)
        .map(|(q, v)| AbortInfo { n, quantity: q.to_string(), value: v })
}

/// `m` single TD steps, optionally recording `|theta - theta_pi|` and `|g|^2`.
#[allow(clippy::too_many_arguments)]
fn inner_td_steps(
    op: &SemiGradientOperator,
    theta: &mut DVector<f64>,
    h: f64,
    m: usize,
    record: bool,
    theta_pi: &DVector<f64>,
    errors: &mut Vec<f64>,
    grad_sq: &mut Vec<f64>,
) {
    let mut grad = DVector::zeros(theta.len());
    let mut diff = DVector::zeros(theta.len());
    for _ in 0..m {
        op.apply_into(theta, &mut grad);
        if record {
            grad_sq.push(grad.norm_squared());
        }
        theta.axpy(-h, &grad, 1.0);
        if record {
            diff.copy_from(theta);
            diff -= theta_pi;
            errors.push(diff.norm());
        }
    }
}

/// Runs the actor-critic scheme selected by `config.schedule`.
pub fn run_actor_critic(mdp: &FiniteMdp, features: &FeatureMap, config: &RunConfig) -> Result<RunTrace> {
    validate_mdp(mdp).into_result()?;
    let cert = build_certificate(mdp, features)?;
    check_config(mdp, features, &cert, config)?;
    let actor = ActorConfig::new(config.lambda, mdp.tau)?;
    let projector = Projector::new(mdp, features)?;
    let star = solve_optimal(mdp, OPTIMAL_TOL)?;
    let v_star_rho = star.v_star.dot(&mdp.rho);

    let theta0 = config.theta0.clone().unwrap_or_else(|| DVector::zeros(features.dim));
    let pi0 = match &config.pi0 {
        Some(f) => PolicyLogits::new(f.clone(), &mdp.mu)?,
        None => PolicyLogits::reference(mdp),
    };
    let mut warnings = Vec::new();
    if let Some(w) = actor.warning() {
        warnings.push(w);
    }
    if projector.ridge_applied {
        warnings.push("ridge added to the feature covariance".to_string());
    }
    let mut meta = TraceMeta {
        h: config.h,
        lambda: config.lambda,
        tau: mdp.tau,
        gamma: mdp.gamma,
        eta: config.lambda / config.h,
        n_policy_updates: config.n_policy_updates,
        schedule: config.schedule,
        theta0: theta0.iter().copied().collect(),
        pi0: rows(pi0.logits()),
        v_star: star.v_star.iter().copied().collect(),
        v_star_rho,
        optimal_tol: OPTIMAL_TOL,
        inner_recorded: config.record_inner_errors,
        warnings,
        abort: None,
    };

    let mut theta = theta0;
    let mut cur = policy_state(mdp, pi0)?;
    let mut records = Vec::with_capacity(config.n_policy_updates);
    let mut n = 0;
    while n < config.n_policy_updates {
        let theta_norm = theta.norm();
        if let Some(abort) = first_divergent(n, theta_norm, cur.l_sup) {
            meta.abort = Some(abort);
            break;
        }
        let q_flat = mdp.flatten(&cur.q);
        let theta_pi = projector.project(&q_flat);
        let residual = (&features.phi * &theta_pi - &q_flat).amax();
        let d_beta = state_action_occupancy(mdp, &cur.policy)?;
        let op = SemiGradientOperator::new(mdp, &cur.policy, features, &d_beta);
        let m = m_schedule(config.schedule, n, config.h, cert.gamma_const)?;

        let critic_err_pre = (&theta - &theta_pi).norm();
        let (mut inner_errors, mut inner_grad_sq) = (Vec::new(), Vec::new());
        if config.record_inner_errors {
            inner_errors.reserve(m + 1);
            inner_grad_sq.reserve(m);
            inner_errors.push(critic_err_pre);
        }
        if !config.record_inner_errors && !config.stepwise_inner && op.squaring_pays(m) {
            theta = op.iterate(&theta, config.h, m);
        } else {
            inner_td_steps(&op, &mut theta, config.h, m, config.record_inner_errors, &theta_pi, &mut inner_errors, &mut inner_grad_sq);
        }
        if theta.iter().any(|x| !x.is_finite()) {
            meta.abort = Some(AbortInfo { n, quantity: "theta".into(), value: theta.amax() });
            break;
        }
        let critic_err = (&theta - &theta_pi).norm();

        let (_, a_hat) = approx_q_and_advantage(&CriticState { theta: theta.clone() }, features, &cur.policy, mdp);
        let next_policy = mirror_step(&cur.policy, &a_hat, &actor, mdp)?;
        let next = policy_state(mdp, next_policy)?;
        let (consec, _) = kl_divergences(&next.policy, &cur.policy, mdp);

        let v_rho = cur.v.dot(&mdp.rho);
        records.push(IterationRecord {
            n,
            k_n: cur.k_n,
            theta_norm,
            l_sup: cur.l_sup,
            v_rho,
            gap: v_rho - v_star_rho,
            critic_err,
            critic_err_pre,
            consec_kl: consec.max(),
            m_used: m,
            inner_errors,
            inner_grad_sq,
            v_states: cur.v.iter().copied().collect(),
            q_sup: cur.q.amax(),
            q_diff: (&next.q - &cur.q).amax(),
            realisability_residual: residual,
        });
        cur = next;
        n += 1;
    }

    let theta_norm = theta.norm();
    if meta.abort.is_none() {
        meta.abort = first_divergent(n, theta_norm, cur.l_sup);
    }
    if let Some(a) = &meta.abort {
        log::warn!("run aborted at n = {}: {} = {:e}", a.n, a.quantity, a.value);
    }
    let v_rho = cur.v.dot(&mdp.rho);
    let final_state = Some(FinalSnapshot {
        n,
        k_n: cur.k_n,
        theta_norm,
        l_sup: cur.l_sup,
        v_rho,
        gap: v_rho - v_star_rho,
        v_states: cur.v.iter().copied().collect(),
        theta: theta.iter().copied().collect(),
        policy_log_density: rows(cur.policy.log_density()),
    });
    Ok(RunTrace { meta, records, final_state })
}

/// One step of mirror descent driven by the exact projected critic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactStepRecord {
    pub n: usize,
    pub gap: f64,
    /// `max_s` total variation distance to the optimal policy.
    pub tv_to_optimal: f64,
}

/// Mirror descent with `theta = theta_{pi^n}` at every step; returns the
/// records for `n = 0..=n_updates` and the final policy.
pub fn exact_mirror_descent(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    lambda: f64,
    n_updates: usize,
    pi0: PolicyLogits,
) -> Result<(Vec<ExactStepRecord>, PolicyLogits)> {
    let actor = ActorConfig::new(lambda, mdp.tau)?;
    let projector = Projector::new(mdp, features)?;
    let star = solve_optimal(mdp, OPTIMAL_TOL)?;
    let p_star = star.pi_star.probabilities(&mdp.mu);
    let v_star_rho = star.v_star.dot(&mdp.rho);
    let mut policy = pi0;
    let mut out = Vec::with_capacity(n_updates + 1);
    for n in 0..=n_updates {
        let eval = evaluate_policy(mdp, &policy)?;
        let probs = policy.probabilities(&mdp.mu);
        let tv = (0..mdp.n_states)
            .map(|s| 0.5 * (0..mdp.n_actions).map(|a| (probs[(s, a)] - p_star[(s, a)]).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        out.push(ExactStepRecord { n, gap: eval.v.dot(&mdp.rho) - v_star_rho, tv_to_optimal: tv });
        if n == n_updates {
            break;
        }
        let theta = projector.project(&mdp.flatten(&eval.q));
        let (_, a_hat) = approx_q_and_advantage(&CriticState { theta }, features, &policy, mdp);
        policy = mirror_step(&policy, &a_hat, &actor, mdp)?;
    }
    Ok((out, policy))
}
