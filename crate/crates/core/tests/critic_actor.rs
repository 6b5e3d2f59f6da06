//! Semi-gradient, mirror step and realisability checked against direct
//! computations.

use nalgebra::{DMatrix, DVector};
use pmdlab_core::actor::gtilde_with;
use pmdlab_core::oracle::{state_action_occupancy, state_occupancy};
use pmdlab_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(mdp: &FiniteMdp, rng: &mut ChaCha8Rng, scale: f64) -> PolicyLogits {
    let f = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |_, _| rng.random_range(-scale..scale));
    PolicyLogits::new(f, &mdp.mu).unwrap()
}

/// `1/2 sum d_beta (Q_theta - y)^2` with the target `y = T^pi Q_frozen` held fixed.
fn frozen_quadratic(features: &FeatureMap, d: &DVector<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let r = &features.phi * theta - y;
    0.5 * r.iter().zip(d.iter()).map(|(x, w)| w * x * x).sum::<f64>()
}

fn frozen_target(mdp: &FiniteMdp, features: &FeatureMap, pi: &PolicyLogits, theta: &DVector<f64>) -> DVector<f64> {
    let q = CriticState { theta: theta.clone() }.q_values(features, mdp);
    mdp.flatten(&bellman_apply(mdp, pi, &q))
}

#[test]
fn semigradient_is_gradient_of_frozen_target_quadratic() {
    let inst = generate(
        &GenSpec { n_states: 3, n_actions: 2, gamma: 0.7, tau: 0.3, features: FeatureKind::RandomRank { k: 4 } },
        9,
    )
    .unwrap();
    let (mdp, features) = (&inst.mdp, &inst.features);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let pi = random_policy(mdp, &mut rng, 2.0);
        let theta = DVector::from_fn(features.dim, |_, _| rng.random_range(-3.0..3.0));
        let (_, g) = msbe_and_semigradient(mdp, &pi, &CriticState { theta: theta.clone() }, features).unwrap();
        let d = mdp.flatten(&state_action_occupancy(mdp, &pi).unwrap());
        let y = frozen_target(mdp, features, &pi, &theta);
        let eps = 1e-6;
        for i in 0..features.dim {
            let mut up = theta.clone();
            up[i] += eps;
            let mut down = theta.clone();
            down[i] -= eps;
            let fd = (frozen_quadratic(features, &d, &y, &up) - frozen_quadratic(features, &d, &y, &down)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-5 * g.amax().max(1e-3), "{fd} vs {}", g[i]);
        }
    }
}

#[test]
fn msbe_matches_direct_sum() {
    let inst = demo("linear_mdp_4x3").unwrap();
    let (mdp, features) = (&inst.mdp, &inst.features);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pi = random_policy(mdp, &mut rng, 1.0);
    let theta = DVector::from_fn(features.dim, |_, _| rng.random_range(-1.0..1.0));
    let (msbe, _) = msbe_and_semigradient(mdp, &pi, &CriticState { theta: theta.clone() }, features).unwrap();
    let d = mdp.flatten(&state_action_occupancy(mdp, &pi).unwrap());
    let y = frozen_target(mdp, features, &pi, &theta);
    assert!((msbe - frozen_quadratic(features, &d, &y, &theta)).abs() < 1e-12);
}

#[test]
fn semigradient_norm_bounded_by_parameter_error() {
    for (name, seed) in [("linear_mdp_4x3", 3u64), ("tabular_6x4", 4), ("cycle2", 5)] {
        let inst = demo(name).unwrap();
        let (mdp, features) = (&inst.mdp, &inst.features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let pi = random_policy(mdp, &mut rng, 3.0);
            let (theta_pi, residual) = exact_theta(mdp, &pi, features).unwrap();
            assert!(residual < 1e-8);
            let theta = &theta_pi + DVector::from_fn(features.dim, |_, _| rng.random_range(-2.0..2.0));
            let (_, g) = msbe_and_semigradient(mdp, &pi, &CriticState { theta: theta.clone() }, features).unwrap();
            let bound = 2.0 * (1.0 + mdp.gamma) * (&theta - &theta_pi).norm_squared();
            assert!(g.norm_squared() <= bound + 1e-12, "{name}");
            // Monotonicity of the semi-gradient at rate Gamma.
            let cert = build_certificate(mdp, features).unwrap();
            let inner = g.dot(&(&theta - &theta_pi));
            assert!(inner >= cert.gamma_const * (&theta - &theta_pi).norm_squared() - 1e-12, "{name}");
        }
    }
}

#[test]
fn mirror_step_satisfies_three_point_identity() {
    let inst = demo("tabular_6x4").unwrap();
    let mdp = &inst.mdp;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = ActorConfig::new(0.7, mdp.tau).unwrap();
    for _ in 0..10 {
        let base = random_policy(mdp, &mut rng, 2.0);
        let a_hat = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |_, _| rng.random_range(-1.0..1.0));
        let next = mirror_step(&base, &a_hat, &config, mdp).unwrap();
        let other = random_policy(mdp, &mut rng, 2.0);
        // For linear G(m) = lambda <a_hat, m> the inequality holds with equality.
        let lin = |p: &PolicyLogits| {
            let probs = p.probabilities(&mdp.mu);
            DVector::from_fn(mdp.n_states, |s, _| {
                config.lambda * (0..mdp.n_actions).map(|a| a_hat[(s, a)] * probs[(s, a)]).sum::<f64>()
            })
        };
        let (kl_o_b, _) = kl_divergences(&other, &base, mdp);
        let (kl_o_n, _) = kl_divergences(&other, &next, mdp);
        let (kl_n_b, _) = kl_divergences(&next, &base, mdp);
        let lhs = lin(&other) + kl_o_b;
        let rhs = lin(&next) + kl_o_n + kl_n_b;
        assert!((lhs - rhs).amax() < 1e-10);
    }
}

#[test]
fn mirror_step_minimises_the_surrogate() {
    let inst = demo("linear_mdp_4x3").unwrap();
    let (mdp, features) = (&inst.mdp, &inst.features);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = ActorConfig::new(0.4, mdp.tau).unwrap();
    for _ in 0..5 {
        let base = random_policy(mdp, &mut rng, 1.5);
        let theta = CriticState { theta: DVector::from_fn(features.dim, |_, _| rng.random_range(-2.0..2.0)) };
        let (_, a_hat) = approx_q_and_advantage(&theta, features, &base, mdp);
        let next = mirror_step(&base, &a_hat, &config, mdp).unwrap();
        let best = gtilde_objective(mdp, &next, &base, &theta, features, &config).unwrap();
        let d = state_occupancy(mdp, &base, &mdp.rho).unwrap();
        assert!((best - gtilde_with(mdp, &next, &base, &a_hat, &d, &config)).abs() < 1e-14);
        for scale in [1e-3, 1e-1, 1.0] {
            for _ in 0..10 {
                let bump = DMatrix::from_fn(mdp.n_states, mdp.n_actions, |_, _| rng.random_range(-scale..scale));
                let cand = PolicyLogits::new(next.log_density() + bump, &mdp.mu).unwrap();
                let value = gtilde_with(mdp, &cand, &base, &a_hat, &d, &config);
                assert!(value >= best - 1e-14, "{value} < {best}");
            }
        }
    }
}

#[test]
fn linear_mdp_features_are_realisable() {
    let inst = generate(
        &GenSpec { n_states: 4, n_actions: 3, gamma: 0.9, tau: 0.5, features: FeatureKind::LinearMdp { k: 2 } },
        1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let pi = random_policy(&inst.mdp, &mut rng, 3.0);
        let (_, residual) = exact_theta(&inst.mdp, &pi, &inst.features).unwrap();
        assert!(residual <= 1e-8, "{residual}");
    }
}

#[test]
fn generic_low_rank_features_are_not_realisable() {
    let inst = generate(
        &GenSpec { n_states: 4, n_actions: 3, gamma: 0.9, tau: 0.5, features: FeatureKind::RandomRank { k: 2 } },
        1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pi = random_policy(&inst.mdp, &mut rng, 1.0);
    let (_, residual) = exact_theta(&inst.mdp, &pi, &inst.features).unwrap();
    assert!(residual > 1e-4, "{residual}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn semigradient_vanishes_at_projection(seed in 0u64..5_000) {
        let inst = demo("tabular_6x4").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(&inst.mdp, &mut rng, 4.0);
        let (theta, _) = exact_theta(&inst.mdp, &pi, &inst.features).unwrap();
        let (_, g) = msbe_and_semigradient(&inst.mdp, &pi, &CriticState { theta }, &inst.features).unwrap();
        prop_assert!(g.amax() < 1e-10);
    }

    #[test]
    fn approximate_advantage_has_zero_policy_mean(seed in 0u64..5_000) {
        let inst = demo("linear_mdp_4x3").unwrap();
        let mdp = &inst.mdp;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = random_policy(mdp, &mut rng, 3.0);
        let theta = CriticState { theta: DVector::from_fn(inst.features.dim, |_, _| rng.random_range(-5.0..5.0)) };
        let (_, a_hat) = approx_q_and_advantage(&theta, &inst.features, &pi, mdp);
        let probs = pi.probabilities(&mdp.mu);
        for s in 0..mdp.n_states {
            let mean: f64 = (0..mdp.n_actions).map(|a| probs[(s, a)] * a_hat[(s, a)]).sum();
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
