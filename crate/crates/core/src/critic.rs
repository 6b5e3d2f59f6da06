//! Linear critic `Q(s, a; theta) = <theta, phi(s, a)>`, its TD semi-gradient
//! and the step-size certificate derived from the feature covariance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::oracle::{evaluate_policy, state_action_occupancy};
use crate::policy::{kl_divergences, PolicyLogits};

/// Smallest admissible `lambda_beta`.
pub const MIN_LAMBDA_BETA: f64 = 1e-14;
/// Condition number above which [`exact_theta`] adds a ridge.
pub const RIDGE_CONDITION: f64 = 1e12;
pub const RIDGE: f64 = 1e-12;
/// Feature rows may exceed unit norm by this much before rescaling.
pub const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dim: usize,
    /// Row `s * A + a` is `phi(s, a)`.
    #[serde(serialize_with = "crate::ser::matrix", deserialize_with = "crate::ser::de_matrix")]
    pub phi: DMatrix<f64>,
    /// Factor every row was divided by to enforce `|phi(s, a)| <= 1`.
    pub scale_applied: f64,
}

impl FeatureMap {
    /// Wraps a feature matrix, rescaling all rows when the largest norm exceeds
    /// one by more than round-off (so re-wrapping saved features is exact).
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.ncols() == 0 || phi.nrows() == 0 {
            return Err(Error::Dimension("feature matrix must be non-empty".into()));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let max_norm = phi.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        let scale = if max_norm > 1.0 + NORM_SLACK { max_norm } else { 1.0 };
        Ok(FeatureMap { dim: phi.ncols(), phi: phi / scale, scale_applied: scale })
    }

    /// One indicator per state-action pair.
    pub fn one_hot(mdp: &FiniteMdp) -> Self {
        let n = mdp.n_pairs();
        FeatureMap { dim: n, phi: DMatrix::identity(n, n), scale_applied: 1.0 }
    }

    pub fn check(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.phi.nrows() != mdp.n_pairs() || self.phi.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "features are {:?}, expected ({}, {})",
                self.phi.shape(),
                mdp.n_pairs(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `Sigma_beta = sum phi phi^T beta(s, a)`.
    pub fn covariance(&self, mdp: &FiniteMdp) -> DMatrix<f64> {
        let w = mdp.flatten(&mdp.beta);
        let weighted = DMatrix::from_fn(self.phi.nrows(), self.dim, |i, j| self.phi[(i, j)] * w[i]);
        let mut sigma = self.phi.transpose() * weighted;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        sigma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticState {
    #[serde(serialize_with = "crate::ser::vector", deserialize_with = "crate::ser::de_vector")]
    pub theta: DVector<f64>,
}

impl CriticState {
    pub fn zeros(dim: usize) -> Self {
        CriticState { theta: DVector::zeros(dim) }
    }

    /// `Q(s, a; theta)` as an `S x A` matrix.
    pub fn q_values(&self, features: &FeatureMap, mdp: &FiniteMdp) -> DMatrix<f64> {
        mdp.unflatten(&(&features.phi * &self.theta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizeCertificate {
    pub gamma: f64,
    pub tau: f64,
    pub lambda_beta: f64,
    /// `|Sigma_beta v - lambda_beta v|` for the returned eigenvector.
    pub eigen_residual: f64,
    /// `Gamma = (1 - gamma)(1 - sqrt(gamma)) lambda_beta`.
    pub gamma_const: f64,
    pub h_critic_bound: f64,
    /// Single-loop threshold with the constants derived in the proof (32, 48).
    pub h_single_loop: f64,
    /// Single-loop threshold with the constants printed in the statement (16, 24).
    pub h_single_loop_stated: f64,
    pub h_double_loop: f64,
    pub cond_32gamma: bool,
}

/// Admissibility of a concrete `(h, lambda)` against a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateFlags {
    pub h_critic_bound_ok: bool,
    pub h_single_loop_ok: bool,
    pub h_single_loop_stated_ok: bool,
    pub h_double_loop_ok: bool,
    pub cond_32gamma: bool,
    pub tau_lambda_ok: bool,
}

impl StepSizeCertificate {
    /// Recomputes every threshold from `(gamma, tau, lambda_beta)`.
    pub fn from_lambda_beta(gamma: f64, tau: f64, lambda_beta: f64, eigen_residual: f64) -> Self {
        let g = (1.0 - gamma) * (1.0 - gamma.sqrt()) * lambda_beta;
        let opg2 = (1.0 + gamma).powi(2);
        let g2 = gamma * gamma;
        let single_loop = |a: f64, b: f64| 0.5 * (g / (3.0 * opg2)).min((g * g - a * g2) / (g * (b * g2 + 3.0 * opg2)));
        StepSizeCertificate {
            gamma,
            tau,
            lambda_beta,
            eigen_residual,
            gamma_const: g,
            h_critic_bound: g / (6.0 * opg2),
            h_single_loop: single_loop(32.0, 48.0),
            h_single_loop_stated: single_loop(16.0, 24.0),
            h_double_loop: (g / (2.0 * (1.0 + gamma))).min(1.0 / g),
            cond_32gamma: 32.0 * g2 / (g * g) < 1.0,
        }
    }

    pub fn evaluate(&self, h: f64, lambda: f64) -> CertificateFlags {
        let tl = self.tau * lambda;
        CertificateFlags {
            h_critic_bound_ok: h > 0.0 && h <= self.h_critic_bound,
            h_single_loop_ok: h > 0.0 && h <= self.h_single_loop,
            h_single_loop_stated_ok: h > 0.0 && h <= self.h_single_loop_stated,
            h_double_loop_ok: h > 0.0 && h < self.h_double_loop,
            cond_32gamma: self.cond_32gamma,
            tau_lambda_ok: tl > 0.0 && tl < 1.0,
        }
    }
}

fn smallest_eigenpair(sigma: &DMatrix<f64>) -> (f64, f64, f64) {
    let eig = SymmetricEigen::new(sigma.clone());
    let (mut imin, mut imax) = (0, 0);
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
    }
    let lmin = eig.eigenvalues[imin];
    let v = eig.eigenvectors.column(imin);
    let residual = (sigma * v - v * lmin).norm();
    (lmin, eig.eigenvalues[imax], residual)
}

pub fn build_certificate(mdp: &FiniteMdp, features: &FeatureMap) -> Result<StepSizeCertificate> {
    features.check(mdp)?;
    let (lambda_beta, _, residual) = smallest_eigenpair(&features.covariance(mdp));
    if !(lambda_beta > MIN_LAMBDA_BETA) {
        return Err(Error::FeaturesRankDeficient { lambda_beta });
    }
    Ok(StepSizeCertificate::from_lambda_beta(mdp.gamma, mdp.tau, lambda_beta, residual))
}

/// `q_hat = <theta, phi>` and `a_hat = q_hat + tau log dpi/dmu - pi-mean`.
pub fn approx_q_and_advantage(
    theta: &CriticState,
    features: &FeatureMap,
    policy: &PolicyLogits,
    mdp: &FiniteMdp,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let q_hat = theta.q_values(features, mdp);
    let probs = policy.probabilities(&mdp.mu);
    let ld = policy.log_density();
    let mut a_hat = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| q_hat[(s, a)] + mdp.tau * ld[(s, a)]);
    for s in 0..mdp.n_states {
        let mean: f64 = (0..mdp.n_actions).map(|a| a_hat[(s, a)] * probs[(s, a)]).sum();
        for a in 0..mdp.n_actions {
            a_hat[(s, a)] -= mean;
        }
    }
    (q_hat, a_hat)
}

/// The semi-gradient for a frozen policy written as the affine map
/// `g(theta) = A theta - b`, together with the pieces needed for the MSBE.
#[derive(Debug, Clone)]
pub struct SemiGradientOperator {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `phi - gamma P^pi phi`, one row per pair.
    psi: DMatrix<f64>,
    /// `c + tau gamma P KL`, flattened.
    target_offset: DVector<f64>,
    weights: DVector<f64>,
}

impl SemiGradientOperator {
    /// Builds the operator for `policy` with the occupancy `d_beta` held fixed.
    pub fn new(mdp: &FiniteMdp, policy: &PolicyLogits, features: &FeatureMap, d_beta: &DMatrix<f64>) -> Self {
        let probs = policy.probabilities(&mdp.mu);
        let (_, kl) = kl_divergences(policy, policy, mdp);
        let kernel = mdp.pair_kernel(&probs);
        let psi = &features.phi - (&kernel * &features.phi) * mdp.gamma;
        let pkl = &mdp.transition * &kl;
        let c = mdp.flatten(&mdp.cost);
        let target_offset = c + pkl * (mdp.tau * mdp.gamma);
        let weights = mdp.flatten(d_beta);
        let weighted_phi = DMatrix::from_fn(features.phi.nrows(), features.dim, |i, j| features.phi[(i, j)] * weights[i]);
        let a = weighted_phi.transpose() * &psi;
        let b = weighted_phi.transpose() * &target_offset;
        SemiGradientOperator { a, b, psi, target_offset, weights }
    }

    /// Writes `A theta - b` into `out` without allocating.
    pub fn apply_into(&self, theta: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.b);
        out.gemv(1.0, &self.a, theta, -1.0);
    }

    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.b.len());
        self.apply_into(theta, &mut out);
        out
    }

    /// `m` TD steps `theta <- theta - h (A theta - b)` as one affine map,
    /// computed by squaring `[[I - hA, hb], [0, 1]]`.
    pub fn iterate(&self, theta: &DVector<f64>, h: f64, m: usize) -> DVector<f64> {
        let d = self.b.len();
        let mut step = DMatrix::identity(d + 1, d + 1);
        let mut block = step.view_mut((0, 0), (d, d));
        block -= &self.a * h;
        step.view_mut((0, d), (d, 1)).copy_from(&(&self.b * h));
        let mut acc = DMatrix::identity(d + 1, d + 1);
        let mut k = m;
        while k > 0 {
            if k & 1 == 1 {
                acc = &step * &acc;
            }
            k >>= 1;
            if k > 0 {
                step = &step * &step;
            }
        }
        acc.view((0, 0), (d, d)) * theta + acc.view((0, d), (d, 1))
    }

    /// Whether [`Self::iterate`] is cheaper than `m` single steps.
    pub fn squaring_pays(&self, m: usize) -> bool {
        let d = self.b.len() as f64;
        let rounds = (usize::BITS - m.leading_zeros()) as f64;
        2.0 * rounds * (d + 1.0).powi(3) < m as f64 * d * d
    }

    /// `1/2 sum (Q(theta) - T Q(theta))^2 d_beta`.
    pub fn msbe(&self, theta: &DVector<f64>) -> f64 {
        let r = &self.psi * theta - &self.target_offset;
        0.5 * r.iter().zip(self.weights.iter()).map(|(x, w)| x * x * w).sum::<f64>()
    }

    /// `max |Q(theta) - T Q(theta)|` over pairs.
    pub fn max_bellman_residual(&self, theta: &DVector<f64>) -> f64 {
        (&self.psi * theta - &self.target_offset).amax()
    }
}

/// MSBE and semi-gradient at `theta`, with `d^pi_beta` computed internally.
pub fn msbe_and_semigradient(
    mdp: &FiniteMdp,
    policy: &PolicyLogits,
    theta: &CriticState,
    features: &FeatureMap,
) -> Result<(f64, DVector<f64>)> {
    let d_beta = state_action_occupancy(mdp, policy)?;
    let op = SemiGradientOperator::new(mdp, policy, features, &d_beta);
    Ok((op.msbe(&theta.theta), op.apply(&theta.theta)))
}

/// `theta - h g`.
pub fn td_step(theta: &CriticState, h: f64, g: &DVector<f64>) -> Result<CriticState> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("critic step h must be positive, got {h}")));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("semi-gradient".into()));
    }
    Ok(CriticState { theta: &theta.theta - g * h })
}

/// Cached `L^2(beta)` projection onto the feature span.
#[derive(Debug, Clone)]
pub struct Projector {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weighted_phi_t: DMatrix<f64>,
    pub ridge_applied: bool,
}

impl Projector {
    pub fn new(mdp: &FiniteMdp, features: &FeatureMap) -> Result<Self> {
        features.check(mdp)?;
        let sigma = features.covariance(mdp);
        let (lmin, lmax, _) = smallest_eigenpair(&sigma);
        if !(lmin > MIN_LAMBDA_BETA) {
            return Err(Error::FeaturesRankDeficient { lambda_beta: lmin });
        }
        let mut system = sigma;
        let ridge_applied = lmax / lmin > RIDGE_CONDITION;
        if ridge_applied {
            log::warn!("feature covariance condition number {:e} exceeds {RIDGE_CONDITION:e}; adding ridge {RIDGE:e}", lmax / lmin);
            for i in 0..system.nrows() {
                system[(i, i)] += RIDGE;
            }
        }
        let chol = system
            .cholesky()
            .ok_or(Error::FeaturesRankDeficient { lambda_beta: lmin })?;
        let w = mdp.flatten(&mdp.beta);
        let weighted_phi_t = DMatrix::from_fn(features.dim, features.phi.nrows(), |j, i| features.phi[(i, j)] * w[i]);
        Ok(Projector { chol, weighted_phi_t, ridge_applied })
    }

    /// Solves `Sigma_beta theta = sum q phi beta`; `q` is flattened by pair.
    pub fn project(&self, q: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&(&self.weighted_phi_t * q))
    }
}

/// `theta_pi` and the realisability residual `max |<theta_pi, phi> - Q^pi_tau|`.
pub fn exact_theta(mdp: &FiniteMdp, policy: &PolicyLogits, features: &FeatureMap) -> Result<(DVector<f64>, f64)> {
    let projector = Projector::new(mdp, features)?;
    let q = mdp.flatten(&evaluate_policy(mdp, policy)?.q);
    let theta = projector.project(&q);
    let residual = (&features.phi * &theta - q).amax();
    Ok((theta, residual))
}
