//! Policies as exponential tilts of the reference measure.
//!
//! A policy is stored as unnormalised logits `f(s, a)`; its density with
//! respect to `mu` is `exp(f(s, a)) / sum_b exp(f(s, b)) mu(b)`. The
//! normaliser is always evaluated with a max-shifted log-sum-exp.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLogits {
    f: DMatrix<f64>,
    log_density: DMatrix<f64>,
}

/// Normalised log-density statistics of a policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogDensityStats {
    /// `l(s, a) = log dpi/dmu(s, a) - sum_b log dpi/dmu(s, b) mu(b)`.
    #[serde(serialize_with = "crate::ser::matrix")]
    pub l: DMatrix<f64>,
    pub sup_norm_l: f64,
    /// Per-state `KL(pi(.|s) | mu)`.
    #[serde(serialize_with = "crate::ser::vector")]
    pub kl_to_mu: DVector<f64>,
    pub k_sup: f64,
}

/// `ln sum_i exp(x_i) w_i`, shifted by the maximum of `x`.
pub fn weighted_log_sum_exp(x: impl Iterator<Item = f64> + Clone, w: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = x.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = x.zip(w).map(|(xi, wi)| (xi - m).exp() * wi).sum();
    m + s.ln()
}

fn normalise(f: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = f.clone();
    for s in 0..f.nrows() {
        // Shift first so the subtraction of the normaliser stays well conditioned.
        let m = f.row(s).max();
        let z = weighted_log_sum_exp(f.row(s).iter().map(|x| x - m), mu.iter().copied());
        for a in 0..f.ncols() {
            out[(s, a)] = (f[(s, a)] - m) - z;
        }
    }
    out
}

impl PolicyLogits {
    /// Builds a policy from logits; fails on any non-finite entry.
    pub fn new(f: DMatrix<f64>, mu: &DVector<f64>) -> Result<Self> {
        if f.ncols() != mu.len() {
            return Err(Error::Dimension(format!(
                "logits have {} actions but mu has {}",
                f.ncols(),
                mu.len()
            )));
        }
        for s in 0..f.nrows() {
            for a in 0..f.ncols() {
                if !f[(s, a)].is_finite() {
                    return Err(Error::LogitsNotBounded { state: s, action: a, value: f[(s, a)] });
                }
            }
        }
        let log_density = normalise(&f, mu);
        Ok(PolicyLogits { f, log_density })
    }

    /// The reference policy `pi = mu` (zero logits).
    pub fn reference(mdp: &FiniteMdp) -> Self {
        PolicyLogits {
            f: DMatrix::zeros(mdp.n_states, mdp.n_actions),
            log_density: DMatrix::zeros(mdp.n_states, mdp.n_actions),
        }
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// `log dpi/dmu(s, a)`.
    pub fn log_density(&self) -> &DMatrix<f64> {
        &self.log_density
    }

    pub fn n_states(&self) -> usize {
        self.f.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.f.ncols()
    }

    /// Action probabilities `pi(a|s) = exp(log dpi/dmu(s, a)) mu(a)`.
    pub fn probabilities(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.f.nrows(), self.f.ncols(), |s, a| self.log_density[(s, a)].exp() * mu[a])
    }

    /// Per-state `ln Z(s) = ln sum_a exp(f(s, a)) mu(a)`.
    pub fn log_normaliser(&self) -> DVector<f64> {
        DVector::from_fn(self.f.nrows(), |s, _| self.f[(s, 0)] - self.log_density[(s, 0)])
    }

    /// Logits shifted so that `ln Z(s) = 0`; same policy, bounded representation.
    pub fn canonical(&self) -> Self {
        PolicyLogits { f: self.log_density.clone(), log_density: self.log_density.clone() }
    }
}

/// Returns `log dpi/dmu` together with the normalised statistics `l`, `K`.
pub fn log_density(policy: &PolicyLogits, mu: &DVector<f64>) -> Result<(DMatrix<f64>, LogDensityStats)> {
    let fresh = PolicyLogits::new(policy.f.clone(), mu)?;
    let ld = fresh.log_density;
    let (ns, na) = ld.shape();
    let mut l = ld.clone();
    let mut kl_to_mu = DVector::zeros(ns);
    for s in 0..ns {
        let mean: f64 = (0..na).map(|a| ld[(s, a)] * mu[a]).sum();
        let mut kl = 0.0;
        for a in 0..na {
            l[(s, a)] = ld[(s, a)] - mean;
            kl += ld[(s, a)].exp() * mu[a] * ld[(s, a)];
        }
        kl_to_mu[s] = kl.max(0.0);
    }
    let sup_norm_l = l.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let k_sup = kl_to_mu.iter().fold(0.0_f64, |m, v| m.max(*v));
    Ok((ld, LogDensityStats { l, sup_norm_l, kl_to_mu, k_sup }))
}

/// Per-state `KL(p | q)` and `KL(p | mu)`, computed in log-density space.
pub fn kl_divergences(p: &PolicyLogits, q: &PolicyLogits, mdp: &FiniteMdp) -> (DVector<f64>, DVector<f64>) {
    let (lp, lq) = (&p.log_density, &q.log_density);
    let mut pq = DVector::zeros(mdp.n_states);
    let mut pmu = DVector::zeros(mdp.n_states);
    for s in 0..mdp.n_states {
        let (mut a_pq, mut a_pmu) = (0.0, 0.0);
        for a in 0..mdp.n_actions {
            let w = lp[(s, a)].exp() * mdp.mu[a];
            a_pq += w * (lp[(s, a)] - lq[(s, a)]);
            a_pmu += w * lp[(s, a)];
        }
        pq[s] = a_pq.max(0.0);
        pmu[s] = a_pmu.max(0.0);
    }
    (pq, pmu)
}
