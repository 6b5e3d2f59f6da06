//! Closed-form mirror-descent step on logits and the surrogate objective it
//! minimises.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::critic::{approx_q_and_advantage, CriticState, FeatureMap};
use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::oracle::state_occupancy;
use crate::policy::{kl_divergences, PolicyLogits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub lambda: f64,
    pub tau: f64,
}

impl ActorConfig {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("actor step lambda must be positive, got {lambda}")));
        }
        Ok(ActorConfig { lambda, tau })
    }

    /// Set when `tau * lambda >= 1`, which voids the stability results.
    pub fn warning(&self) -> Option<String> {
        (self.tau * self.lambda >= 1.0).then(|| {
            format!("tau*lambda = {} >= 1: stability guarantees do not apply", self.tau * self.lambda)
        })
    }
}

/// `f' = f - lambda a_hat`, returned in canonical gauge (`ln Z = 0` before the step).
pub fn mirror_step(policy: &PolicyLogits, a_hat: &DMatrix<f64>, config: &ActorConfig, mdp: &FiniteMdp) -> Result<PolicyLogits> {
    if a_hat.shape() != policy.logits().shape() {
        return Err(Error::Dimension(format!(
            "advantage is {:?}, policy is {:?}",
            a_hat.shape(),
            policy.logits().shape()
        )));
    }
    if let Some(w) = config.warning() {
        log::warn!("{w}");
    }
    PolicyLogits::new(policy.log_density() - a_hat * config.lambda, &mdp.mu)
}

/// `sum_s d^base_rho(s) [ sum_a a_hat(s, a) candidate(a|s) + KL(candidate | base)(s) / lambda ]`,
/// where `a_hat` is the critic's advantage estimate under `base`.
pub fn gtilde_objective(
    mdp: &FiniteMdp,
    candidate: &PolicyLogits,
    base: &PolicyLogits,
    theta: &CriticState,
    features: &FeatureMap,
    config: &ActorConfig,
) -> Result<f64> {
    let d = state_occupancy(mdp, base, &mdp.rho)?;
    let (_, a_hat) = approx_q_and_advantage(theta, features, base, mdp);
    Ok(gtilde_with(mdp, candidate, base, &a_hat, &d, config))
}

/// [`gtilde_objective`] with precomputed advantage and occupancy.
pub fn gtilde_with(
    mdp: &FiniteMdp,
    candidate: &PolicyLogits,
    base: &PolicyLogits,
    a_hat: &DMatrix<f64>,
    d: &nalgebra::DVector<f64>,
    config: &ActorConfig,
) -> f64 {
    let probs = candidate.probabilities(&mdp.mu);
    let (kl, _) = kl_divergences(candidate, base, mdp);
    (0..mdp.n_states)
        .map(|s| {
            let lin: f64 = (0..mdp.n_actions).map(|a| a_hat[(s, a)] * probs[(s, a)]).sum();
            d[s] * (lin + kl[s] / config.lambda)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn one_state() -> FiniteMdp {
        FiniteMdp {
            n_states: 1,
            n_actions: 2,
            transition: DMatrix::from_element(2, 1, 1.0),
            cost: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            gamma: 0.5,
            tau: 1.0,
            mu: DVector::from_element(2, 0.5),
            rho: DVector::from_element(1, 1.0),
            beta: DMatrix::from_element(1, 2, 0.5),
        }
    }

    #[test]
    fn tilt_by_opposite_advantages() {
        let mdp = one_state();
        let cfg = ActorConfig::new(0.5, 1.0).unwrap();
        let a_hat = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let next = mirror_step(&PolicyLogits::reference(&mdp), &a_hat, &cfg, &mdp).unwrap();
        // 1 / (1 + e)
        let expected = 0.268_941_421_369_995_1;
        assert!((next.probabilities(&mdp.mu)[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_or_constant_advantage_leaves_policy() {
        let mdp = one_state();
        let cfg = ActorConfig::new(0.3, 1.0).unwrap();
        let pi = PolicyLogits::new(DMatrix::from_row_slice(1, 2, &[0.4, -0.2]), &mdp.mu).unwrap();
        for a_hat in [DMatrix::zeros(1, 2), DMatrix::from_element(1, 2, 3.0)] {
            let next = mirror_step(&pi, &a_hat, &cfg, &mdp).unwrap();
            assert!((next.log_density() - pi.log_density()).amax() < 1e-14);
        }
    }

    #[test]
    fn large_tau_lambda_warns() {
        assert!(ActorConfig::new(2.0, 0.5).unwrap().warning().is_some());
        assert!(ActorConfig::new(1.0, 0.5).unwrap().warning().is_none());
        assert!(ActorConfig::new(0.0, 0.5).is_err());
    }
}
