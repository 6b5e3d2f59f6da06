//! Inequality checks on a [`RunTrace`].
//!
//! Every check passes, fails with the first violating iteration, or is
//! skipped with the unmet precondition named. Each inequality `lhs <= rhs`
//! is granted an absolute slack of `1e-9` plus a relative slack of `1e-9`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::critic::{build_certificate, CertificateFlags, FeatureMap, StepSizeCertificate};
use crate::driver::{schedule_constant, AbortInfo, RunTrace, ScheduleConstant, ScheduleKind};
use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::oracle::{solve_optimal, state_occupancy};
use crate::policy::{kl_divergences, PolicyLogits};

pub const TOL_ABS: f64 = 1e-9;
pub const TOL_REL: f64 = 1e-9;
/// Largest realisability residual under which the critic-error checks apply.
pub const REALISABILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub status: CheckStatus,
    pub pass: bool,
    pub skip_reason: Option<String>,
    pub first_violation_n: Option<usize>,
    /// `min (rhs - lhs)` over all evaluated instances.
    #[serde(serialize_with = "crate::ser::float", deserialize_with = "crate::ser::de_float")]
    pub worst_margin: f64,
    pub evaluated: usize,
    /// Check-specific scalars (fitted constants, suprema, flags as 0/1).
    pub reported: BTreeMap<String, Option<f64>>,
    /// Per-iteration margins, only when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Vec<Option<f64>>>,
}

impl CheckReport {
    fn skipped(name: &str, reason: impl Into<String>) -> Self {
        CheckReport {
            check_name: name.to_string(),
            status: CheckStatus::Skipped,
            pass: true,
            skip_reason: Some(format!("precondition: {}", reason.into())),
            first_violation_n: None,
            worst_margin: f64::NAN,
            evaluated: 0,
            reported: BTreeMap::new(),
            details: None,
        }
    }

    fn report(mut self, key: &str, value: f64) -> Self {
        self.reported.insert(key.to_string(), value.is_finite().then_some(value));
        self
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Fail
    }
}

/// Accumulates `lhs <= rhs` instances indexed by outer iteration.
struct Inequality {
    name: &'static str,
    worst: f64,
    first_violation: Option<usize>,
    evaluated: usize,
    details: Option<Vec<Option<f64>>>,
}

impl Inequality {
    fn new(name: &'static str, keep_details: bool) -> Self {
        Inequality { name, worst: f64::INFINITY, first_violation: None, evaluated: 0, details: keep_details.then(Vec::new) }
    }

    fn add(&mut self, n: usize, lhs: f64, rhs: f64) {
        let margin = rhs - lhs;
        let slack = TOL_ABS + TOL_REL * lhs.abs().max(rhs.abs());
        self.evaluated += 1;
        // An infinite right-hand side holds for any finite left-hand side;
        // every other non-finite comparison is a violation.
        let ok = if lhs.is_finite() && rhs.is_finite() {
            margin >= -slack
        } else {
            lhs.is_finite() && rhs == f64::INFINITY
        };
        let margin = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        self.worst = self.worst.min(margin);
        if !ok && self.first_violation.is_none() {
            self.first_violation = Some(n);
        }
        if let Some(d) = &mut self.details {
            d.push(margin.is_finite().then_some(margin));
        }
    }

    fn finish(self) -> CheckReport {
        let pass = self.first_violation.is_none();
        CheckReport {
            check_name: self.name.to_string(),
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            pass,
            skip_reason: None,
            first_violation_n: self.first_violation,
            worst_margin: if self.evaluated == 0 { f64::NAN } else { self.worst },
            evaluated: self.evaluated,
            reported: BTreeMap::new(),
            details: self.details,
        }
    }
}

/// Constants of the proofs evaluated on a concrete instance and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProofConstants {
    /// `max{1, 2 / (1 - gamma)}`, used by the cumulative-error bound.
    pub c_gamma: f64,
    /// `max{1, 2 gamma / (1 - gamma)}`, used by the schedule constant.
    pub c_gamma_schedule: f64,
    pub schedule: Option<ScheduleConstant>,
    /// `tau gamma / (1 - gamma)`.
    pub alpha2: f64,
    /// Per-iteration `(sqrt(2) tau gamma |l_n| + gamma |Q^n|) / (1 - gamma)`.
    #[serde(serialize_with = "crate::ser::floats", deserialize_with = "crate::ser::de_floats")]
    pub alpha1: Vec<f64>,
    /// `max_s d^{pi*}_rho(s) / rho(s)`.
    #[serde(serialize_with = "crate::ser::float", deserialize_with = "crate::ser::de_float")]
    pub xi_statement: f64,
    /// `xi_statement / (1 - gamma)`.
    #[serde(serialize_with = "crate::ser::float", deserialize_with = "crate::ser::de_float")]
    pub xi_proof: f64,
    /// `(xi_proof - 1) / xi_proof`.
    #[serde(serialize_with = "crate::ser::float", deserialize_with = "crate::ser::de_float")]
    pub kappa: f64,
    /// `KL(pi* | pi^0)` integrated against `d^{pi*}_rho`.
    pub kl_star_pi0: f64,
}

/// Concentrability of `d^{pi*}_rho` with respect to `rho`, in both readings.
pub fn concentrability(mdp: &FiniteMdp, pi_star: &PolicyLogits) -> Result<(f64, f64)> {
    let d = state_occupancy(mdp, pi_star, &mdp.rho)?;
    let mut xi: f64 = 0.0;
    for s in 0..mdp.n_states {
        let ratio = if mdp.rho[s] > 0.0 {
            d[s] / mdp.rho[s]
        } else if d[s] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        xi = xi.max(ratio);
    }
    Ok((xi, xi / (1.0 - mdp.gamma)))
}

fn kappa_of(xi: f64) -> f64 {
    if xi.is_finite() {
        (xi - 1.0) / xi
    } else {
        1.0
    }
}

pub fn proof_constants(mdp: &FiniteMdp, cert: &StepSizeCertificate, trace: &RunTrace) -> Result<ProofConstants> {
    let g = mdp.gamma;
    let star = solve_optimal(mdp, trace.meta.optimal_tol)?;
    let (xi_statement, xi_proof) = concentrability(mdp, &star.pi_star)?;
    let pi0 = PolicyLogits::new(crate::mdp::matrix_from_rows(&trace.meta.pi0, mdp.n_actions, "pi0")?, &mdp.mu)?;
    let d_star = state_occupancy(mdp, &star.pi_star, &mdp.rho)?;
    let (kl, _) = kl_divergences(&star.pi_star, &pi0, mdp);
    let theta0 = DVector::from_vec(trace.meta.theta0.clone());
    let alpha1 = trace
        .records
        .iter()
        .map(|r| (2f64.sqrt() * mdp.tau * g * r.l_sup + g * r.q_sup) / (1.0 - g))
        .collect();
    Ok(ProofConstants {
        c_gamma: (2.0 / (1.0 - g)).max(1.0),
        c_gamma_schedule: (2.0 * g / (1.0 - g)).max(1.0),
        schedule: schedule_constant(mdp, cert, &theta0, trace.meta.h).ok(),
        alpha2: mdp.tau * g / (1.0 - g),
        alpha1,
        xi_statement,
        xi_proof,
        kappa: kappa_of(xi_proof),
        kl_star_pi0: kl.dot(&d_star),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Attach per-iteration margins to every check.
    pub details: bool,
}

fn max_residual(trace: &RunTrace) -> f64 {
    trace.records.iter().map(|r| r.realisability_residual).fold(0.0, f64::max)
}

fn realisable(trace: &RunTrace) -> std::result::Result<(), String> {
    let r = max_residual(trace);
    if r <= REALISABILITY_TOL {
        Ok(())
    } else {
        Err(format!("realisability residual {r:e} exceeds {REALISABILITY_TOL:e}"))
    }
}

/// Boundedness of a compensated sequence over the executed horizon.
///
/// The check fails only on a non-finite entry. Stabilisation (the maximum
/// over the last quarter not exceeding the maximum over the earlier points)
/// is reported as `stabilised`, alongside the fitted constant and its argmax.
fn stabilisation(name: &'static str, seq: &[(usize, f64)]) -> CheckReport {
    if seq.len() < 4 {
        return CheckReport::skipped(name, format!("fewer than 4 points ({})", seq.len()));
    }
    let mut c = Inequality::new(name, false);
    if let Some(&(n, _)) = seq.iter().find(|(_, v)| !v.is_finite()) {
        c.add(n, f64::INFINITY, 0.0);
        return c.finish();
    }
    let split = seq.len() - seq.len() / 4;
    let argmax = |part: &[(usize, f64)]| {
        part.iter().copied().fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
    };
    let (_, head) = argmax(&seq[..split]);
    let (_, tail) = argmax(&seq[split..]);
    let (n_all, all) = argmax(seq);
    c.add(n_all, all, all);
    let stabilised = tail <= head + TOL_ABS + TOL_REL * head.abs();
    c.finish()
        .report("fitted_constant", all)
        .report("argmax_n", n_all as f64)
        .report("head_max", head)
        .report("tail_max", tail)
        .report("last_value", seq[seq.len() - 1].1)
        .report("stabilised", stabilised as u8 as f64)
}

/// Critic-norm recursion, log-density recursion, KL/log-density relation and
/// the reported supremum of `K_n + |theta^n|`.
pub fn check_stability(
    trace: &RunTrace,
    cert: &StepSizeCertificate,
    mdp: &FiniteMdp,
    opts: VerifyOptions,
) -> Vec<CheckReport> {
    let meta = &trace.meta;
    let (h, lambda, tau, g) = (meta.h, meta.lambda, mdp.tau, mdp.gamma);
    let n_records = trace.records.len();
    let mut out = Vec::new();

    const CRITIC_NORM: &str = "critic_norm_bound";
    if !(h <= cert.h_critic_bound) {
        out.push(CheckReport::skipped(
            CRITIC_NORM,
            format!("h = {h:e} exceeds Gamma/(6(1+gamma)^2) = {:e}", cert.h_critic_bound),
        ));
    } else {
        let gc = cert.gamma_const;
        let alpha = (3.0 * h + 2.0 / gc) / (gc - 3.0 * h * (1.0 + g).powi(2));
        let theta0_sq: f64 = meta.theta0.iter().map(|x| x * x).sum();
        let c2 = mdp.cost_sup().powi(2);
        let mut c = Inequality::new(CRITIC_NORM, opts.details);
        let mut k_sup: f64 = 0.0;
        for n in 0..n_records {
            k_sup = k_sup.max(trace.records[n].k_n);
            if let Some((theta_next, _, _)) = trace.state_at(n + 1) {
                let rhs = theta0_sq + tau * tau * g * g * alpha * k_sup * k_sup + c2 * alpha;
                c.add(n, theta_next * theta_next, rhs);
            }
        }
        out.push(c.finish().report("alpha_h", alpha));
    }

    const LOG_RECURSION: &str = "log_density_recursion";
    if tau * lambda > 1.0 {
        out.push(CheckReport::skipped(LOG_RECURSION, format!("tau*lambda = {} > 1", tau * lambda)));
    } else {
        let mut c = Inequality::new(LOG_RECURSION, opts.details);
        for (n, r) in trace.records.iter().enumerate() {
            if let Some((theta_next, l_next, _)) = trace.state_at(n + 1) {
                c.add(n, l_next, (1.0 - tau * lambda) * r.l_sup + 2.0 * lambda * theta_next);
            }
        }
        out.push(c.finish());
    }

    let mut c = Inequality::new("kl_log_density_relation", opts.details);
    for n in 0..=n_records {
        if let Some((_, l, k)) = trace.state_at(n) {
            c.add(n, k, 2.0 * l);
        }
    }
    out.push(c.finish());

    let seq: Vec<(usize, f64)> =
        (0..=n_records).filter_map(|n| trace.state_at(n).map(|(t, _, k)| (n, k + t))).collect();
    let sup = seq.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let mut report = stabilisation("bounded_iterates", &seq);
    if report.status == CheckStatus::Skipped {
        let mut c = Inequality::new("bounded_iterates", opts.details);
        for &(n, v) in &seq {
            if v.is_finite() {
                c.add(n, v, v);
            } else {
                c.add(n, f64::INFINITY, 0.0);
            }
        }
        report = c.finish();
    }
    out.push(report.report("sup_k_plus_theta", sup));
    out
}

/// Outer and inner critic contraction, semi-gradient norm bound and inner-loop bookkeeping.
pub fn check_critic(
    trace: &RunTrace,
    cert: &StepSizeCertificate,
    mdp: &FiniteMdp,
    opts: VerifyOptions,
) -> Vec<CheckReport> {
    let meta = &trace.meta;
    let (h, g) = (meta.h, mdp.gamma);
    let hg = h * cert.gamma_const;
    let real = realisable(trace);
    let admissible = if h > 0.0 && h < cert.h_double_loop {
        Ok(())
    } else {
        Err(format!("h = {h:e} not below min{{Gamma/(2(1+gamma)), 1/Gamma}} = {:e}", cert.h_double_loop))
    };
    let both = real.clone().and(admissible.clone());
    let mut out = Vec::new();

    const OUTER: &str = "outer_critic_contraction";
    match &both {
        Err(e) => out.push(CheckReport::skipped(OUTER, e.clone())),
        Ok(()) => {
            let mut c = Inequality::new(OUTER, opts.details);
            for r in &trace.records {
                c.add(r.n, r.critic_err.powi(2), (-(r.m_used as f64) * hg).exp() * r.critic_err_pre.powi(2));
            }
            out.push(c.finish());
        }
    }

    const BOOKKEEPING: &str = "inner_bookkeeping";
    if !meta.inner_recorded {
        out.push(CheckReport::skipped(BOOKKEEPING, "inner errors not recorded"));
    } else {
        let mut c = Inequality::new(BOOKKEEPING, opts.details);
        for r in &trace.records {
            let len_gap = (r.inner_errors.len() as f64 - (r.m_used + 1) as f64).abs()
                + (r.inner_grad_sq.len() as f64 - r.m_used as f64).abs();
            let ends = match (r.inner_errors.first(), r.inner_errors.last()) {
                (Some(a), Some(b)) => (a - r.critic_err_pre).abs() + (b - r.critic_err).abs(),
                _ => f64::INFINITY,
            };
            c.add(r.n, len_gap + ends, 0.0);
        }
        out.push(c.finish());
    }

    const STEP: &str = "inner_step_contraction";
    const CUMULATIVE: &str = "inner_cumulative_contraction";
    match (&both, meta.inner_recorded) {
        (Err(e), _) => {
            out.push(CheckReport::skipped(STEP, e.clone()));
            out.push(CheckReport::skipped(CUMULATIVE, e.clone()));
        }
        (Ok(()), false) => {
            out.push(CheckReport::skipped(STEP, "inner errors not recorded"));
            out.push(CheckReport::skipped(CUMULATIVE, "inner errors not recorded"));
        }
        (Ok(()), true) => {
            let mut step = Inequality::new(STEP, opts.details);
            let mut cum = Inequality::new(CUMULATIVE, opts.details);
            for r in &trace.records {
                let e0 = r.inner_errors[0].powi(2);
                let mut factor = 1.0;
                for k in 1..r.inner_errors.len() {
                    factor *= 1.0 - hg;
                    step.add(r.n, r.inner_errors[k].powi(2), (1.0 - hg) * r.inner_errors[k - 1].powi(2));
                    cum.add(r.n, r.inner_errors[k].powi(2), factor * e0);
                }
            }
            out.push(step.finish());
            out.push(cum.finish());
        }
    }

    const GRAD: &str = "semigradient_norm_bound";
    match (&real, meta.inner_recorded) {
        (Err(e), _) => out.push(CheckReport::skipped(GRAD, e.clone())),
        (Ok(()), false) => out.push(CheckReport::skipped(GRAD, "inner errors not recorded")),
        (Ok(()), true) => {
            let mut c = Inequality::new(GRAD, opts.details);
            for r in &trace.records {
                for (k, gsq) in r.inner_grad_sq.iter().enumerate() {
                    c.add(r.n, *gsq, 2.0 * (1.0 + g) * r.inner_errors[k].powi(2));
                }
            }
            out.push(c.finish());
        }
    }
    out
}

/// Value improvement, cumulative-error bound, rate shapes, Q continuity and
/// the consecutive-KL bound.
pub fn check_value_and_rates(
    trace: &RunTrace,
    constants: &ProofConstants,
    mdp: &FiniteMdp,
    cert: &StepSizeCertificate,
    opts: VerifyOptions,
) -> Vec<CheckReport> {
    let meta = &trace.meta;
    let (h, lambda, tau, g) = (meta.h, meta.lambda, mdp.tau, mdp.gamma);
    let tl = tau * lambda;
    let n_records = trace.records.len();
    let real = realisable(trace);
    let mut out = Vec::new();

    const IMPROVEMENT: &str = "value_improvement";
    match real.clone().and(if tl <= 1.0 { Ok(()) } else { Err(format!("tau*lambda = {tl} > 1")) }) {
        Err(e) => out.push(CheckReport::skipped(IMPROVEMENT, e)),
        Ok(()) => {
            let mut c = Inequality::new(IMPROVEMENT, opts.details);
            let mut worst_increase = f64::NEG_INFINITY;
            for r in &trace.records {
                let Some(next) = trace.v_states_at(r.n + 1) else { continue };
                let bound = 2.0 / (1.0 - g) * r.critic_err;
                let mut lhs_worst = f64::NEG_INFINITY;
                for ((v_next, v_now), v_star) in next.iter().zip(&r.v_states).zip(&meta.v_star) {
                    lhs_worst = lhs_worst.max(v_star - meta.optimal_tol - v_next);
                    lhs_worst = lhs_worst.max(v_next - v_now - bound);
                    worst_increase = worst_increase.max(v_next - v_now);
                }
                c.add(r.n, lhs_worst, 0.0);
            }
            out.push(c.finish().report("max_pointwise_increase", worst_increase));
        }
    }

    const CUMULATIVE: &str = "cumulative_error_bound";
    match real.clone().and(if tl > 0.0 && tl < 1.0 { Ok(()) } else { Err(format!("tau*lambda = {tl} not in (0, 1)")) }) {
        Err(e) => out.push(CheckReport::skipped(CUMULATIVE, e)),
        Ok(()) => {
            let mut c = Inequality::new(CUMULATIVE, opts.details);
            let gap0 = trace.records.first().map_or(0.0, |r| r.gap);
            let (mut min_gap, mut err_sum) = (f64::INFINITY, 0.0);
            for n in 1..=n_records {
                let r = &trace.records[n - 1];
                min_gap = min_gap.min(r.gap);
                err_sum += r.critic_err;
                let rhs = (constants.kl_star_pi0 + lambda * gap0 + lambda * constants.c_gamma * err_sum)
                    / (lambda * (1.0 - g) * n as f64);
                c.add(n, min_gap, rhs);
            }
            out.push(c.finish());
        }
    }

    const SUBLINEAR: &str = "sublinear_rate";
    let below_half = h > 0.0 && h < cert.gamma_const / (2.0 * (1.0 + g));
    match meta.schedule {
        ScheduleKind::Logarithmic { c } => {
            let pre = real
                .clone()
                .and(if below_half { Ok(()) } else { Err(format!("h = {h:e} not below Gamma/(2(1+gamma))")) })
                .and(match &constants.schedule {
                    None => Err("schedule constant undefined for this h".to_string()),
                    Some(sc) if c + TOL_ABS < sc.c_raw => {
                        Err(format!("c = {c} below the schedule constant {}", sc.c_raw))
                    }
                    Some(_) => Ok(()),
                });
            match pre {
                Err(e) => out.push(CheckReport::skipped(SUBLINEAR, e)),
                Ok(()) => {
                    let mut min_gap = f64::INFINITY;
                    let seq: Vec<(usize, f64)> = (1..=n_records)
                        .map(|n| {
                            min_gap = min_gap.min(trace.records[n - 1].gap);
                            (n, n as f64 * min_gap)
                        })
                        .collect();
                    out.push(stabilisation(SUBLINEAR, &seq));
                }
            }
        }
        _ => out.push(CheckReport::skipped(SUBLINEAR, "schedule is not logarithmic")),
    }

    const LINEAR: &str = "linear_rate";
    let xi = constants.xi_statement;
    let proof_condition = 1.0 / lambda < tau * constants.xi_proof;
    match meta.schedule {
        ScheduleKind::Linear { c } => {
            let pre = real
                .clone()
                .and(if below_half { Ok(()) } else { Err(format!("h = {h:e} not below Gamma/(2(1+gamma))")) })
                .and(if xi.is_finite() && xi > 1.0 { Ok(()) } else { Err(format!("concentrability xi = {xi} must be finite and > 1")) })
                .and(if tl <= (xi - 1.0) / xi { Ok(()) } else { Err(format!("tau*lambda = {tl} exceeds (xi-1)/xi = {}", (xi - 1.0) / xi)) });
            match pre {
                Err(e) => out.push(CheckReport::skipped(LINEAR, e).report("proof_condition_holds", proof_condition as u8 as f64)),
                Ok(()) => {
                    let rate = (1.0 / constants.xi_proof).min(c);
                    let seq: Vec<(usize, f64)> = (0..=n_records)
                        .filter_map(|n| trace.gap_at(n).map(|gap| (n, gap * (rate * n as f64).exp())))
                        .collect();
                    out.push(
                        stabilisation(LINEAR, &seq)
                            .report("rate", rate)
                            .report("proof_condition_holds", proof_condition as u8 as f64)
                            .report("statement_condition_holds", 1.0),
                    );
                }
            }
        }
        _ => out.push(CheckReport::skipped(LINEAR, "schedule is not linear")),
    }

    let mut c = Inequality::new("q_continuity", opts.details);
    let mut c_corrected = Inequality::new("q_continuity_corrected", false);
    for (n, r) in trace.records.iter().enumerate() {
        let kl = r.consec_kl.max(0.0);
        c.add(n, r.q_diff, constants.alpha1[n] * kl.sqrt() + constants.alpha2 * kl);
        let a1 = 2f64.sqrt() * (tau * g * r.l_sup + g * r.q_sup) / (1.0 - g);
        c_corrected.add(n, r.q_diff, a1 * kl.sqrt() + constants.alpha2 * kl);
    }
    let corrected = c_corrected.finish();
    out.push(
        c.finish()
            .report("alpha2", constants.alpha2)
            .report("pinsker_corrected_pass", corrected.pass as u8 as f64)
            .report("pinsker_corrected_worst_margin", corrected.worst_margin),
    );

    const CONSEC: &str = "consecutive_kl_bound";
    if !(tl > 0.0 && tl < 1.0) {
        out.push(CheckReport::skipped(CONSEC, format!("tau*lambda = {tl} not in (0, 1)")));
    } else {
        let mut c = Inequality::new(CONSEC, opts.details);
        for (n, r) in trace.records.iter().enumerate() {
            if let Some((theta_next, _, _)) = trace.state_at(n + 1) {
                c.add(n, r.consec_kl, lambda / (1.0 - tl) * theta_next);
            }
        }
        out.push(c.finish());
    }

    const SINGLE_RATE: &str = "single_loop_rate";
    if !meta.schedule.is_single_loop() {
        out.push(CheckReport::skipped(SINGLE_RATE, "schedule is not single-loop"));
    } else if !(h <= cert.h_critic_bound || (h <= cert.h_single_loop && cert.cond_32gamma && tl > 0.0 && tl < 1.0)) {
        out.push(CheckReport::skipped(SINGLE_RATE, "h outside both single-loop stability regimes"));
    } else {
        let mut min_gap = f64::INFINITY;
        let seq: Vec<(usize, f64)> = (1..=n_records)
            .map(|n| {
                min_gap = min_gap.min(trace.records[n - 1].gap);
                (n, min_gap / (1.0 / (n as f64 * h).sqrt() + lambda / h))
            })
            .collect();
        out.push(stabilisation(SINGLE_RATE, &seq).report("eta", meta.eta));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub certificate: StepSizeCertificate,
    pub flags: CertificateFlags,
    pub constants: ProofConstants,
    pub abort: Option<AbortInfo>,
    pub checks: Vec<CheckReport>,
}

impl VerificationReport {
    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.check_name == name)
    }

    /// Process exit code: 0 when nothing failed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Runs every check against a trace produced on `mdp` with `features`.
pub fn verify_trace(
    trace: &RunTrace,
    mdp: &FiniteMdp,
    features: &FeatureMap,
    opts: VerifyOptions,
) -> Result<VerificationReport> {
    if trace.meta.v_star.len() != mdp.n_states {
        return Err(Error::Schema(format!(
            "trace has {} optimal values, instance has {} states",
            trace.meta.v_star.len(),
            mdp.n_states
        )));
    }
    if (trace.meta.gamma - mdp.gamma).abs() > 0.0 || (trace.meta.tau - mdp.tau).abs() > 0.0 {
        return Err(Error::Schema("trace gamma/tau differ from the instance".into()));
    }
    let cert = build_certificate(mdp, features)?;
    let constants = proof_constants(mdp, &cert, trace)?;
    let mut checks = Vec::new();
    let mut completed = Inequality::new("run_completed", false);
    completed.add(trace.meta.abort.as_ref().map_or(0, |a| a.n), trace.meta.abort.is_some() as u8 as f64, 0.0);
    checks.push(completed.finish());
    checks.extend(check_stability(trace, &cert, mdp, opts));
    checks.extend(check_critic(trace, &cert, mdp, opts));
    checks.extend(check_value_and_rates(trace, &constants, mdp, &cert, opts));
    let passed = !checks.iter().any(CheckReport::failed);
    Ok(VerificationReport {
        passed,
        flags: cert.evaluate(trace.meta.h, trace.meta.lambda),
        certificate: cert,
        constants,
        abort: trace.meta.abort.clone(),
        checks,
    })
}
