//! Policy mirror descent with linear temporal-difference critics for
//! entropy-regularised finite MDPs.
//!
//! The crate evaluates every quantity exactly (finite weighted sums and
//! direct linear solves) so that the stability and convergence inequalities
//! of the actor-critic schemes can be checked numerically along each run.
//!
//! - [`mdp`], [`policy`]: instances and log-density policies.
//! - [`oracle`]: exact values, soft-optimal solution, occupancies.
//! - [`critic`], [`actor`]: linear critic, TD semi-gradient, mirror step.
//! - [`driver`]: single- and double-loop runs producing a [`RunTrace`].
//! - [`verifier`]: inequality checks on a trace.
//! - [`generate`]: seeded instance generators and bundled demos.
//! - [`config`]: run configuration files.

// Guards like `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod config;
pub mod critic;
pub mod driver;
pub mod error;
pub mod generate;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod ser;
pub mod trace_io;
pub mod verifier;

pub use actor::{gtilde_objective, mirror_step, ActorConfig};
pub use config::{demo_spec, RunSpec, ScheduleSpec, StepSpec, Threshold};
pub use critic::{
    approx_q_and_advantage, build_certificate, exact_theta, msbe_and_semigradient, td_step, CertificateFlags,
    CriticState, FeatureMap, SemiGradientOperator, StepSizeCertificate,
};
pub use driver::{
    exact_mirror_descent, m_schedule, run_actor_critic, schedule_constant, RunConfig, RunTrace, ScheduleConstant,
    ScheduleKind,
};
pub use error::{Error, Result};
pub use generate::{demo, generate, FeatureKind, GenSpec, Instance, DEMO_NAMES};
pub use mdp::{validate_mdp, FiniteMdp, ValidationReport};
pub use oracle::{
    bellman_apply, evaluate_policy, occupancies, performance_difference, solve_optimal, state_occupancy_kernel,
    OccupancyMeasures, PolicyEvaluation,
};
pub use policy::{kl_divergences, log_density, LogDensityStats, PolicyLogits};
pub use verifier::{
    concentrability, verify_trace, CheckReport, CheckStatus, ProofConstants, VerificationReport, VerifyOptions,
};
