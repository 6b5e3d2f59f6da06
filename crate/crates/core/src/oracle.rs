//! Exact solvers: policy evaluation, the Bellman operator, soft value
//! iteration, occupancy measures and the performance-difference identity.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::policy::{kl_divergences, weighted_log_sum_exp, PolicyLogits};

/// Default stopping tolerance for [`solve_optimal`].
pub const OPTIMAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    #[serde(serialize_with = "crate::ser::vector")]
    pub v: DVector<f64>,
    #[serde(serialize_with = "crate::ser::matrix")]
    pub q: DMatrix<f64>,
    #[serde(serialize_with = "crate::ser::matrix")]
    pub advantage: DMatrix<f64>,
    #[serde(serialize_with = "crate::ser::vector")]
    pub kl_term: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyMeasures {
    /// `d^pi_rho` over states.
    #[serde(serialize_with = "crate::ser::vector")]
    pub d_state: DVector<f64>,
    /// `d^pi_beta` over state-action pairs, indexed `(s, a)`.
    #[serde(serialize_with = "crate::ser::matrix")]
    pub d_state_action: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub v_star: DVector<f64>,
    pub q_star: DMatrix<f64>,
    pub pi_star: PolicyLogits,
    pub iterations: usize,
}

fn solve(m: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = m.clone().lu();
    let x = lu.solve(b).ok_or_else(|| Error::Singular(what.to_string()))?;
    // One step of iterative refinement keeps the residual at round-off level.
    let r = b - &m * &x;
    let dx = lu.solve(&r).unwrap_or_else(|| DVector::zeros(b.len()));
    Ok(x + dx)
}

/// `c(s, a) + gamma sum_s' P(s'|s, a) w(s')` as an `S x A` matrix.
pub(crate) fn one_step(mdp: &FiniteMdp, w: &DVector<f64>) -> DMatrix<f64> {
    let pw = &mdp.transition * w;
    DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| mdp.cost[(s, a)] + mdp.gamma * pw[mdp.pair(s, a)])
}

/// `V^pi_tau`, `Q^pi_tau`, `A^pi_tau` by a direct linear solve.
pub fn evaluate_policy(mdp: &FiniteMdp, policy: &PolicyLogits) -> Result<PolicyEvaluation> {
    let ns = mdp.n_states;
    let probs = policy.probabilities(&mdp.mu);
    let (_, kl_term) = kl_divergences(policy, policy, mdp);
    let c_pi = DVector::from_fn(ns, |s, _| {
        (0..mdp.n_actions).map(|a| probs[(s, a)] * mdp.cost[(s, a)]).sum::<f64>() + mdp.tau * kl_term[s]
    });
    let system = DMatrix::identity(ns, ns) - mdp.state_kernel(&probs) * mdp.gamma;
    let v = solve(system, &c_pi, "on-policy Bellman system")?;
    let q = one_step(mdp, &v);
    let ld = policy.log_density();
    let advantage = DMatrix::from_fn(ns, mdp.n_actions, |s, a| q[(s, a)] + mdp.tau * ld[(s, a)] - v[s]);
    Ok(PolicyEvaluation { v, q, advantage, kl_term })
}

/// `T^pi_tau f(s, a) = c + gamma P^pi f + tau gamma P KL(pi | mu)`.
pub fn bellman_apply(mdp: &FiniteMdp, policy: &PolicyLogits, f: &DMatrix<f64>) -> DMatrix<f64> {
    let probs = policy.probabilities(&mdp.mu);
    let (_, kl) = kl_divergences(policy, policy, mdp);
    let w = DVector::from_fn(mdp.n_states, |s, _| {
        (0..mdp.n_actions).map(|a| probs[(s, a)] * f[(s, a)]).sum::<f64>() + mdp.tau * kl[s]
    });
    one_step(mdp, &w)
}

/// Soft value iteration to sup-norm accuracy `tol`.
pub fn solve_optimal(mdp: &FiniteMdp, tol: f64) -> Result<OptimalSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let (ns, na, tau) = (mdp.n_states, mdp.n_actions, mdp.tau);
    let soft_min = |q: &DMatrix<f64>| {
        DVector::from_fn(ns, |s, _| {
            -tau * weighted_log_sum_exp((0..na).map(|a| -q[(s, a)] / tau), mdp.mu.iter().copied())
        })
    };
    let mut v = DVector::zeros(ns);
    let mut iterations = 0;
    loop {
        let next = soft_min(&one_step(mdp, &v));
        let change = (&next - &v).amax();
        v = next;
        iterations += 1;
        if !change.is_finite() {
            return Err(Error::NonFinite("soft value iteration".into()));
        }
        if change <= tol * (1.0 - mdp.gamma) {
            break;
        }
    }
    let q_star = one_step(mdp, &v);
    let pi_star = PolicyLogits::new(-&q_star / tau, &mdp.mu)?;
    Ok(OptimalSolution { v_star: v, q_star, pi_star, iterations })
}

/// Rows are `d^pi_s` for each starting state `s`: `(1 - gamma)(I - gamma P_pi)^{-1}`.
pub fn state_occupancy_kernel(mdp: &FiniteMdp, policy: &PolicyLogits) -> Result<DMatrix<f64>> {
    let ns = mdp.n_states;
    let system = DMatrix::identity(ns, ns) - mdp.state_kernel(&policy.probabilities(&mdp.mu)) * mdp.gamma;
    let inv = system.try_inverse().ok_or_else(|| Error::Singular("occupancy kernel".into()))?;
    Ok(inv * (1.0 - mdp.gamma))
}

/// `d^pi_rho` over states.
pub fn state_occupancy(mdp: &FiniteMdp, policy: &PolicyLogits, rho: &DVector<f64>) -> Result<DVector<f64>> {
    let ns = mdp.n_states;
    let system = DMatrix::identity(ns, ns) - mdp.state_kernel(&policy.probabilities(&mdp.mu)).transpose() * mdp.gamma;
    Ok(solve(system, rho, "state occupancy")? * (1.0 - mdp.gamma))
}

/// `d^pi_beta` over state-action pairs.
pub fn state_action_occupancy(mdp: &FiniteMdp, policy: &PolicyLogits) -> Result<DMatrix<f64>> {
    let np = mdp.n_pairs();
    let kernel = mdp.pair_kernel(&policy.probabilities(&mdp.mu));
    let system = DMatrix::identity(np, np) - kernel.transpose() * mdp.gamma;
    let d = solve(system, &mdp.flatten(&mdp.beta), "state-action occupancy")? * (1.0 - mdp.gamma);
    Ok(mdp.unflatten(&d))
}

pub fn occupancies(mdp: &FiniteMdp, policy: &PolicyLogits) -> Result<OccupancyMeasures> {
    let d_state = state_occupancy(mdp, policy, &mdp.rho)?;
    let d_state_action = state_action_occupancy(mdp, policy)?;
    for (name, total) in [("d_state", d_state.sum()), ("d_state_action", d_state_action.sum())] {
        debug_assert!((total - 1.0).abs() <= 1e-10, "{name} sums to {total}");
    }
    Ok(OccupancyMeasures { d_state, d_state_action })
}

/// Both sides of the performance-difference identity for `V^p(rho) - V^q(rho)`.
pub fn performance_difference(mdp: &FiniteMdp, p: &PolicyLogits, q: &PolicyLogits) -> Result<(f64, f64)> {
    let ep = evaluate_policy(mdp, p)?;
    let eq = evaluate_policy(mdp, q)?;
    let lhs = ep.v.dot(&mdp.rho) - eq.v.dot(&mdp.rho);
    let d = state_occupancy(mdp, p, &mdp.rho)?;
    let (pp, qp) = (p.probabilities(&mdp.mu), q.probabilities(&mdp.mu));
    let (kl_pq, _) = kl_divergences(p, q, mdp);
    let lq = q.log_density();
    let mut rhs = 0.0;
    for s in 0..mdp.n_states {
        let inner: f64 = (0..mdp.n_actions)
            .map(|a| (eq.q[(s, a)] + mdp.tau * lq[(s, a)]) * (pp[(s, a)] - qp[(s, a)]))
            .sum();
        rhs += d[s] * (inner + mdp.tau * kl_pq[s]);
    }
    Ok((lhs, rhs / (1.0 - mdp.gamma)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(cost: [f64; 4], gamma: f64, tau: f64) -> FiniteMdp {
        FiniteMdp {
            n_states: 2,
            n_actions: 2,
            transition: DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]),
            cost: DMatrix::from_row_slice(2, 2, &cost),
            gamma,
            tau,
            mu: DVector::from_element(2, 0.5),
            rho: DVector::from_vec(vec![1.0, 0.0]),
            beta: DMatrix::from_element(2, 2, 0.25),
        }
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = FiniteMdp {
            n_states: 1,
            n_actions: 1,
            transition: DMatrix::from_element(1, 1, 1.0),
            cost: DMatrix::from_element(1, 1, 1.0),
            gamma: 0.5,
            tau: 0.3,
            mu: DVector::from_element(1, 1.0),
            rho: DVector::from_element(1, 1.0),
            beta: DMatrix::from_element(1, 1, 1.0),
        };
        let e = evaluate_policy(&mdp, &PolicyLogits::reference(&mdp)).unwrap();
        assert!((e.v[0] - 2.0).abs() < 1e-14);
        assert!((e.q[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(e.advantage[(0, 0)].abs() < 1e-14);
        let occ = occupancies(&mdp, &PolicyLogits::reference(&mdp)).unwrap();
        assert!((occ.d_state[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn deterministic_cycle_values_and_occupancy() {
        let mdp = cycle([1.0, 1.0, 0.0, 0.0], 0.5, 0.7);
        let pi = PolicyLogits::reference(&mdp);
        let e = evaluate_policy(&mdp, &pi).unwrap();
        assert!((e.v[0] - 4.0 / 3.0).abs() < 1e-14);
        assert!((e.v[1] - 2.0 / 3.0).abs() < 1e-14);
        let occ = occupancies(&mdp, &pi).unwrap();
        assert!((occ.d_state[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((occ.d_state[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_cost_optimum_is_reference() {
        let mdp = cycle([0.0; 4], 0.9, 0.5);
        let sol = solve_optimal(&mdp, OPTIMAL_TOL).unwrap();
        assert!(sol.v_star.amax() < 1e-14);
        let probs = sol.pi_star.probabilities(&mdp.mu);
        assert!(probs.iter().all(|p| (p - 0.5).abs() < 1e-14));
    }

    #[test]
    fn non_positive_tol_rejected() {
        let mdp = cycle([0.0; 4], 0.9, 0.5);
        assert!(matches!(solve_optimal(&mdp, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bellman_of_zero_under_reference_is_cost() {
        let mdp = cycle([1.0, 0.5, 0.0, 0.25], 0.5, 0.5);
        let out = bellman_apply(&mdp, &PolicyLogits::reference(&mdp), &DMatrix::zeros(2, 2));
        assert!((out - &mdp.cost).amax() < 1e-15);
    }
}
