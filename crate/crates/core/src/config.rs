//! Run configuration files: flat JSON mirroring [`RunConfig`], with step
//! sizes expressible relative to the instance's certificate.
//!
//! `h` and `lambda` have no defaults. `h` is a number or
//! `{"factor": 0.9, "of": "h_double_loop"}`; a schedule constant may be
//! `"auto"`, meaning [`schedule_constant`] at the resolved `h`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::critic::{build_certificate, StepSizeCertificate};
use crate::driver::{schedule_constant, RunConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::generate::Instance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    HCriticBound,
    HSingleLoop,
    HSingleLoopStated,
    HDoubleLoop,
}

impl Threshold {
    pub fn value(self, cert: &StepSizeCertificate) -> f64 {
        match self {
            Threshold::HCriticBound => cert.h_critic_bound,
            Threshold::HSingleLoop => cert.h_single_loop,
            Threshold::HSingleLoopStated => cert.h_single_loop_stated,
            Threshold::HDoubleLoop => cert.h_double_loop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Value(f64),
    Relative { factor: f64, of: Threshold },
}

impl StepSpec {
    pub fn resolve(self, cert: &StepSizeCertificate) -> f64 {
        match self {
            StepSpec::Value(h) => h,
            StepSpec::Relative { factor, of } => factor * of.value(cert),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstantSpec {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    SingleLoop,
    ConstantM { m: usize },
    Logarithmic { c: ConstantSpec },
    Linear { c: ConstantSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub h: StepSpec,
    pub lambda: f64,
    pub n_policy_updates: usize,
    pub schedule: ScheduleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    /// Initial logits, one row per state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi0: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub enforce_certificate: bool,
    #[serde(default = "default_true")]
    pub record_inner_errors: bool,
    #[serde(default)]
    pub stepwise_inner: bool,
}

fn default_true() -> bool {
    true
}

impl RunSpec {
    pub fn new(h: StepSpec, lambda: f64, n_policy_updates: usize, schedule: ScheduleSpec) -> Self {
        RunSpec {
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

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Concrete [`RunConfig`] for `inst`.
    pub fn resolve(&self, inst: &Instance) -> Result<RunConfig> {
        let cert = build_certificate(&inst.mdp, &inst.features)?;
        let h = self.h.resolve(&cert);
        let theta0 = self.theta0.clone().map(DVector::from_vec);
        let auto = || -> Result<f64> {
            let start = theta0.clone().unwrap_or_else(|| DVector::zeros(inst.features.dim));
            Ok(schedule_constant(&inst.mdp, &cert, &start, h)?.c)
        };
        let constant = |c: ConstantSpec| match c {
            ConstantSpec::Value(v) => Ok(v),
            ConstantSpec::Auto(_) => auto(),
        };
        let schedule = match self.schedule {
            ScheduleSpec::SingleLoop => ScheduleKind::SingleLoop,
            ScheduleSpec::ConstantM { m } => ScheduleKind::ConstantM { m },
            ScheduleSpec::Logarithmic { c } => ScheduleKind::Logarithmic { c: constant(c)? },
            ScheduleSpec::Linear { c } => ScheduleKind::Linear { c: constant(c)? },
        };
        schedule.validate()?;
        let pi0 = match &self.pi0 {
            None => None,
            Some(rows) => {
                if rows.len() != inst.mdp.n_states || rows.iter().any(|r| r.len() != inst.mdp.n_actions) {
                    return Err(Error::Dimension(format!(
                        "pi0 must be {} rows of {} logits",
                        inst.mdp.n_states, inst.mdp.n_actions
                    )));
                }
                Some(DMatrix::from_fn(inst.mdp.n_states, inst.mdp.n_actions, |s, a| rows[s][a]))
            }
        };
        let mut config = RunConfig::new(h, self.lambda, self.n_policy_updates, schedule);
        config.theta0 = theta0;
        config.pi0 = pi0;
        config.enforce_certificate = self.enforce_certificate;
        config.record_inner_errors = self.record_inner_errors;
        config.stepwise_inner = self.stepwise_inner;
        Ok(config)
    }
}

/// Run specification bundled with each demo instance.
pub fn demo_spec(name: &str) -> Result<RunSpec> {
    let rel = |factor, of| StepSpec::Relative { factor, of };
    let auto = ConstantSpec::Auto(AutoTag::Auto);
    match name {
        "tabular_6x4" => {
            let mut spec = RunSpec::new(
                rel(1.0, Threshold::HCriticBound),
                0.5,
                500,
                ScheduleSpec::Logarithmic { c: auto },
            );
            spec.record_inner_errors = false;
            Ok(spec)
        }
        "linear_mdp_4x3" => {
            let mut spec = RunSpec::new(
                rel(1.0, Threshold::HCriticBound),
                0.5,
                200,
                ScheduleSpec::Logarithmic { c: auto },
            );
            spec.record_inner_errors = false;
            Ok(spec)
        }
        "cycle2" => Ok(RunSpec::new(rel(1.0, Threshold::HCriticBound), 1.0, 300, ScheduleSpec::SingleLoop)),
        other => Err(Error::InvalidArgument(format!("unknown demo '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::demo;

    #[test]
    fn parses_relative_step_and_auto_constant() {
        let text = r#"{"h": {"factor": 0.5, "of": "h_critic_bound"}, "lambda": 0.5, "n_policy_updates": 10,
                       "schedule": {"kind": "logarithmic", "c": "auto"}, "record_inner_errors": false}"#;
        let spec = RunSpec::from_json_str(text).unwrap();
        assert_eq!(spec.h, StepSpec::Relative { factor: 0.5, of: Threshold::HCriticBound });
        assert_eq!(spec.schedule, ScheduleSpec::Logarithmic { c: ConstantSpec::Auto(AutoTag::Auto) });
        let inst = demo("cycle2").unwrap();
        let config = spec.resolve(&inst).unwrap();
        let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
        assert_eq!(config.h, 0.5 * cert.h_critic_bound);
        assert!(matches!(config.schedule, ScheduleKind::Logarithmic { c } if c > 0.0));
        // The constant is undefined once h reaches Gamma / (3 (1 + gamma)^2).
        let mut large = spec.clone();
        large.h = StepSpec::Relative { factor: 0.9, of: Threshold::HDoubleLoop };
        assert!(matches!(large.resolve(&inst), Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn missing_step_size_is_an_error_with_position() {
        let err = RunSpec::from_json_str("{\n  \"lambda\": 0.5,\n  \"n_policy_updates\": 3,\n  \"schedule\": {\"kind\": \"single_loop\"}\n}")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing field `h`") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected() {
        let err = RunSpec::from_json_str(r#"{"h": 0.1, "lambda": 1, "n_policy_updates": 1, "schedule": {"kind": "single_loop"}, "eta": 3}"#)
            .unwrap_err();
        assert!(err.to_string().contains("eta"));
    }

    #[test]
    fn demo_specs_round_trip() {
        for name in crate::generate::DEMO_NAMES {
            let spec = demo_spec(name).unwrap();
            let back = RunSpec::from_json_str(&serde_json::to_string(&spec).unwrap()).unwrap();
            assert_eq!(spec, back);
            spec.resolve(&demo(name).unwrap()).unwrap();
        }
    }
}
