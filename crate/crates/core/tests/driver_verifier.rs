//! Runs, trace files and the verifier on hand-built and fixed-point cases.

use nalgebra::{DMatrix, DVector};
use pmdlab_core::oracle::{state_occupancy, OPTIMAL_TOL};
use pmdlab_core::trace_io::{read_trace, read_trace_from, write_trace, CSV_COLUMNS, TRACE_CSV, TRACE_SIDECAR};
use pmdlab_core::verifier::{check_critic, check_stability};
use pmdlab_core::*;

fn short_run(name: &str, h_of: impl Fn(&StepSizeCertificate) -> f64, lambda: f64, n: usize, schedule: ScheduleKind) -> (Instance, RunTrace) {
    let inst = demo(name).unwrap();
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let trace = run_actor_critic(&inst.mdp, &inst.features, &RunConfig::new(h_of(&cert), lambda, n, schedule)).unwrap();
    (inst, trace)
}

fn find<'a>(reports: &'a [CheckReport], name: &str) -> &'a CheckReport {
    reports.iter().find(|r| r.check_name == name).unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn fabricated_log_density_jump_fails_at_first_step() {
    // tau = 0.5 on cycle2, so lambda = 1 gives tau * lambda = 0.5.
    let (inst, mut trace) = short_run("cycle2", |c| c.h_critic_bound, 1.0, 1, ScheduleKind::SingleLoop);
    trace.records[0].l_sup = 1.0;
    let fin = trace.final_state.as_mut().unwrap();
    fin.l_sup = 10.0;
    fin.theta_norm = 0.0;
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let reports = check_stability(&trace, &cert, &inst.mdp, VerifyOptions::default());
    let r = find(&reports, "log_density_recursion");
    assert_eq!(r.status, CheckStatus::Fail);
    assert_eq!(r.first_violation_n, Some(0));
    assert!((r.worst_margin + 9.5).abs() < 1e-12, "{}", r.worst_margin);
}

#[test]
fn critic_norm_bound_skipped_above_threshold() {
    let (inst, trace) = short_run("cycle2", |c| 2.0 * c.h_critic_bound, 1.0, 3, ScheduleKind::SingleLoop);
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let r = check_stability(&trace, &cert, &inst.mdp, VerifyOptions::default());
    let r = find(&r, "critic_norm_bound");
    assert_eq!(r.status, CheckStatus::Skipped);
    assert!(r.skip_reason.as_deref().unwrap().starts_with("precondition"));
    assert!(r.pass);
}

#[test]
fn admissible_single_loop_stability_checks_pass() {
    let (inst, trace) = short_run("tabular_6x4", |c| c.h_critic_bound, 0.5, 100, ScheduleKind::SingleLoop);
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let reports = check_stability(&trace, &cert, &inst.mdp, VerifyOptions { details: true });
    for name in ["critic_norm_bound", "log_density_recursion", "kl_log_density_relation"] {
        let r = find(&reports, name);
        assert_eq!(r.status, CheckStatus::Pass, "{name}");
        assert_eq!(r.details.as_ref().unwrap().len(), r.evaluated);
    }
}

#[test]
fn double_loop_outer_contraction_has_positive_margin() {
    let (inst, trace) = short_run("tabular_6x4", |c| 0.9 * c.h_double_loop, 0.5, 20, ScheduleKind::ConstantM { m: 50 });
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let reports = check_critic(&trace, &cert, &inst.mdp, VerifyOptions::default());
    let r = find(&reports, "outer_critic_contraction");
    assert_eq!(r.status, CheckStatus::Pass);
    assert!(r.worst_margin > 0.0);
}

#[test]
fn starting_at_the_optimum_stays_there() {
    let inst = demo("cycle2").unwrap();
    let (mdp, features) = (&inst.mdp, &inst.features);
    let cert = build_certificate(mdp, features).unwrap();
    let star = solve_optimal(mdp, OPTIMAL_TOL).unwrap();
    let (theta_star, _) = exact_theta(mdp, &star.pi_star, features).unwrap();
    let mut config = RunConfig::new(0.9 * cert.h_double_loop, 1.0, 30, ScheduleKind::ConstantM { m: 5 });
    config.pi0 = Some(star.pi_star.logits().clone());
    config.theta0 = Some(theta_star);
    let trace = run_actor_critic(mdp, features, &config).unwrap();
    assert!(trace.records.iter().all(|r| r.gap.abs() <= 1e-8));
    let report = verify_trace(&trace, mdp, features, VerifyOptions::default()).unwrap();
    assert!(report.passed);
    assert_eq!(report.check("cumulative_error_bound").unwrap().status, CheckStatus::Pass);
    // theta^n = theta_{pi^n}: both sides of the contraction vanish.
    let outer = report.check("outer_critic_contraction").unwrap();
    assert_eq!(outer.status, CheckStatus::Pass);
    assert!(outer.worst_margin.abs() < 1e-20);
}

#[test]
fn concentrability_examples() {
    let one = FiniteMdp {
        n_states: 1,
        n_actions: 2,
        transition: DMatrix::from_element(2, 1, 1.0),
        cost: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        gamma: 0.9,
        tau: 0.1,
        mu: DVector::from_element(2, 0.5),
        rho: DVector::from_element(1, 1.0),
        beta: DMatrix::from_element(1, 2, 0.5),
    };
    let star = solve_optimal(&one, OPTIMAL_TOL).unwrap();
    let (xi, xi_proof) = concentrability(&one, &star.pi_star).unwrap();
    assert_eq!(xi, 1.0);
    assert!((xi_proof - 10.0).abs() < 1e-12);

    // Everything moves to state 0: d = (0.2 * 0.5 + 0.8, 0.2 * 0.5) = (0.9, 0.1).
    let absorbing = FiniteMdp {
        n_states: 2,
        n_actions: 2,
        transition: DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]),
        cost: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.2]),
        gamma: 0.8,
        tau: 0.3,
        mu: DVector::from_element(2, 0.5),
        rho: DVector::from_element(2, 0.5),
        beta: DMatrix::from_element(2, 2, 0.25),
    };
    let star = solve_optimal(&absorbing, OPTIMAL_TOL).unwrap();
    let (xi, _) = concentrability(&absorbing, &star.pi_star).unwrap();
    assert!((xi - 1.8).abs() < 1e-12, "{xi}");

    // rho = d^{pi*}_rho gives xi = 1.
    let mut mdp = demo("tabular_6x4").unwrap().mdp;
    let star = solve_optimal(&mdp, OPTIMAL_TOL).unwrap();
    // The stationary law of P_{pi*} is the fixed point of rho -> d^{pi*}_rho.
    let p = mdp.state_kernel(&star.pi_star.probabilities(&mdp.mu));
    for _ in 0..500 {
        mdp.rho = p.transpose() * &mdp.rho;
    }
    assert!((state_occupancy(&mdp, &star.pi_star, &mdp.rho).unwrap() - &mdp.rho).amax() < 1e-12);
    let (xi, _) = concentrability(&mdp, &star.pi_star).unwrap();
    assert!((xi - 1.0).abs() < 1e-10, "{xi}");

    // A state never started from but visited.
    let mut holed = absorbing.clone();
    holed.rho = DVector::from_vec(vec![0.0, 1.0]);
    let (xi, _) = concentrability(&holed, &star_of(&holed)).unwrap();
    assert_eq!(xi, f64::INFINITY);
}

fn star_of(mdp: &FiniteMdp) -> PolicyLogits {
    solve_optimal(mdp, OPTIMAL_TOL).unwrap().pi_star
}

#[test]
fn trace_files_round_trip_exactly() {
    let (inst, trace) = short_run("linear_mdp_4x3", |c| 0.5 * c.h_double_loop, 0.5, 12, ScheduleKind::Linear { c: 0.05 });
    let dir = tempfile::tempdir().unwrap();
    write_trace(&trace, dir.path()).unwrap();
    let back = read_trace(dir.path()).unwrap();
    assert_eq!(trace, back);
    let header = std::fs::read_to_string(dir.path().join(TRACE_CSV)).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let a = verify_trace(&trace, &inst.mdp, &inst.features, VerifyOptions::default()).unwrap();
    let b = verify_trace(&back, &inst.mdp, &inst.features, VerifyOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn truncated_trace_names_the_missing_column() {
    let (_, trace) = short_run("cycle2", |c| c.h_critic_bound, 1.0, 4, ScheduleKind::SingleLoop);
    let dir = tempfile::tempdir().unwrap();
    write_trace(&trace, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(TRACE_CSV)).unwrap();
    let cut: String = csv
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    let sidecar = std::fs::File::open(dir.path().join(TRACE_SIDECAR)).unwrap();
    match read_trace_from(cut.as_bytes(), sidecar) {
        Err(Error::Schema(msg)) => assert!(msg.contains("m_used"), "{msg}"),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn divergent_run_aborts_and_fails_verification() {
    let (inst, trace) = short_run("cycle2", |_| 400.0, 1.0, 50, ScheduleKind::ConstantM { m: 10 });
    let abort = trace.meta.abort.as_ref().expect("run should abort");
    assert!(abort.n < 50);
    let report = verify_trace(&trace, &inst.mdp, &inst.features, VerifyOptions::default()).unwrap();
    assert!(!report.passed);
    assert_eq!(report.check("run_completed").unwrap().status, CheckStatus::Fail);
    assert_eq!(report.exit_code(), 1);
}

#[test]
fn enforced_certificate_rejects_large_steps() {
    let inst = demo("tabular_6x4").unwrap();
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let mut config = RunConfig::new(2.0 * cert.h_double_loop, 0.5, 5, ScheduleKind::ConstantM { m: 3 });
    config.enforce_certificate = true;
    assert!(matches!(run_actor_critic(&inst.mdp, &inst.features, &config), Err(Error::Precondition(_))));
    config.h = 0.5 * cert.h_double_loop;
    assert!(run_actor_critic(&inst.mdp, &inst.features, &config).is_ok());
    config.lambda = 2.0;
    assert!(matches!(run_actor_critic(&inst.mdp, &inst.features, &config), Err(Error::Precondition(_))));
}

#[test]
fn exact_critic_limit_is_monotone() {
    let inst = generate(&GenSpec { n_states: 2, n_actions: 2, gamma: 0.1, tau: 1.0, features: FeatureKind::Onehot }, 3).unwrap();
    let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
    let trace = run_actor_critic(
        &inst.mdp,
        &inst.features,
        &RunConfig::new(0.9 * cert.h_double_loop, 0.5, 30, ScheduleKind::ConstantM { m: 10_000 }),
    )
    .unwrap();
    for n in 0..trace.records.len() {
        let (now, next) = (trace.v_states_at(n).unwrap(), trace.v_states_at(n + 1).unwrap());
        assert!(now.iter().zip(next).all(|(a, b)| *b <= a + 1e-8));
    }
}
