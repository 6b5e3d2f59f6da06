//! Grid runs over `(h, lambda, schedule)`.
//!
//! The sweep config holds lists under `h`, `lambda` and `schedule`; every
//! other key is shared by all runs and has the meaning it has in a run
//! config. Runs go to `<out>/run_NNN/`, and `<out>/summary.csv` gets one row
//! per run in grid order (h outermost, schedule innermost).

use std::path::Path;

use log::info;
use pmdlab_core::config::{ConstantSpec, ScheduleSpec};
use pmdlab_core::trace_io::write_trace;
use pmdlab_core::{build_certificate, run_actor_critic, verify_trace, Instance, RunSpec, StepSpec, VerifyOptions};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{create_dir, load_instance, load_json_object, write_file, CliError, CliResult, VERIFICATION_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Serialize)]
struct SummaryRow {
    run: String,
    h_spec: String,
    h: f64,
    lambda: f64,
    schedule: String,
    h_critic_bound_ok: bool,
    h_single_loop_ok: bool,
    h_single_loop_stated_ok: bool,
    h_double_loop_ok: bool,
    tau_lambda_ok: bool,
    completed: bool,
    updates: usize,
    final_gap: f64,
    passed: bool,
    failed_checks: String,
}

fn grid_list(map: &mut Map<String, Value>, key: &str, origin: &str) -> CliResult<Vec<Value>> {
    match map.remove(key) {
        Some(Value::Array(items)) if !items.is_empty() => Ok(items),
        Some(single @ (Value::Number(_) | Value::Object(_))) => Ok(vec![single]),
        Some(_) => Err(CliError::Usage(format!("{origin}: `{key}` must be a non-empty list"))),
        None => Err(CliError::Usage(format!("{origin}: missing field `{key}`"))),
    }
}

fn label_step(h: &StepSpec) -> String {
    match h {
        StepSpec::Value(v) => format!("{v}"),
        StepSpec::Relative { factor, of } => {
            format!("{factor}*{}", serde_json::to_value(of).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        }
    }
}

fn label_schedule(s: &ScheduleSpec) -> String {
    let c = |c: &ConstantSpec| match c {
        ConstantSpec::Value(v) => format!("{v}"),
        ConstantSpec::Auto(_) => "auto".into(),
    };
    match s {
        ScheduleSpec::SingleLoop => "single_loop".into(),
        ScheduleSpec::ConstantM { m } => format!("constant_m(m={m})"),
        ScheduleSpec::Logarithmic { c: k } => format!("logarithmic(c={})", c(k)),
        ScheduleSpec::Linear { c: k } => format!("linear(c={})", c(k)),
    }
}

/// Expands the sweep config into run specs in grid order.
fn expand(mut map: Map<String, Value>, origin: &str) -> CliResult<Vec<RunSpec>> {
    let hs = grid_list(&mut map, "h", origin)?;
    let lambdas = grid_list(&mut map, "lambda", origin)?;
    let schedules = grid_list(&mut map, "schedule", origin)?;
    let mut specs = Vec::new();
    for h in &hs {
        for lambda in &lambdas {
            for schedule in &schedules {
                let mut point = map.clone();
                point.insert("h".into(), h.clone());
                point.insert("lambda".into(), lambda.clone());
                point.insert("schedule".into(), schedule.clone());
                let spec: RunSpec = serde_json::from_value(Value::Object(point))
                    .map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
                specs.push(spec);
            }
        }
    }
    Ok(specs)
}

fn one_run(inst: &Instance, spec: &RunSpec, index: usize, out: &Path) -> CliResult<SummaryRow> {
    let cert = build_certificate(&inst.mdp, &inst.features)?;
    let config = spec.resolve(inst)?;
    let flags = cert.evaluate(config.h, config.lambda);
    let trace = run_actor_critic(&inst.mdp, &inst.features, &config)?;
    let name = format!("run_{index:03}");
    let dir = out.join(&name);
    create_dir(&dir)?;
    write_trace(&trace, &dir)?;
    let report = verify_trace(&trace, &inst.mdp, &inst.features, VerifyOptions::default())?;
    write_file(&dir.join(VERIFICATION_FILE), &serde_json::to_string_pretty(&report)?)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| c.failed()).map(|c| c.check_name.as_str()).collect();
    info!("{name}: h = {:e}, passed = {}", config.h, report.passed);
    Ok(SummaryRow {
        run: name,
        h_spec: label_step(&spec.h),
        h: config.h,
        lambda: config.lambda,
        schedule: label_schedule(&spec.schedule),
        h_critic_bound_ok: flags.h_critic_bound_ok,
        h_single_loop_ok: flags.h_single_loop_ok,
        h_single_loop_stated_ok: flags.h_single_loop_stated_ok,
        h_double_loop_ok: flags.h_double_loop_ok,
        tau_lambda_ok: flags.tau_lambda_ok,
        completed: trace.completed(),
        updates: trace.records.len(),
        final_gap: trace.final_state.as_ref().map_or(f64::NAN, |f| f.gap),
        passed: report.passed,
        failed_checks: failed.join(" "),
    })
}

pub fn cmd_sweep(instance: &Path, config: &Path, out: &Path, workers: Option<usize>) -> CliResult<u8> {
    let inst = load_instance(instance)?;
    let specs = expand(load_json_object(config)?, &config.display().to_string())?;
    create_dir(out)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let rows: Vec<CliResult<SummaryRow>> =
        pool.install(|| specs.par_iter().enumerate().map(|(i, spec)| one_run(&inst, spec, i, out)).collect());
    let mut writer = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    for row in rows {
        writer.serialize(row?)?;
    }
    writer.flush().map_err(|source| CliError::Io { path: out.join(SUMMARY_FILE), source })?;
    println!("wrote {} runs to {}", specs.len(), out.join(SUMMARY_FILE).display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_is_h_then_lambda_then_schedule() {
        let map = serde_json::from_str(
            r#"{"h": [0.1, 0.2], "lambda": [0.5, 1.0], "schedule": [{"kind": "single_loop"}], "n_policy_updates": 3}"#,
        )
        .unwrap();
        let specs = expand(map, "t").unwrap();
        let pairs: Vec<(String, f64)> = specs.iter().map(|s| (label_step(&s.h), s.lambda)).collect();
        assert_eq!(pairs, [("0.1".into(), 0.5), ("0.1".into(), 1.0), ("0.2".into(), 0.5), ("0.2".into(), 1.0)]);
    }

    #[test]
    fn missing_grid_key_is_a_usage_error() {
        let map = serde_json::from_str(r#"{"h": [0.1], "schedule": [{"kind": "single_loop"}], "n_policy_updates": 3}"#).unwrap();
        let err = expand(map, "sweep.json").unwrap_err().to_string();
        assert!(err.contains("lambda"), "{err}");
    }

    #[test]
    fn labels() {
        assert_eq!(label_schedule(&ScheduleSpec::ConstantM { m: 4 }), "constant_m(m=4)");
        let rel: StepSpec = serde_json::from_str(r#"{"factor": 2, "of": "h_double_loop"}"#).unwrap();
        assert_eq!(label_step(&rel), "2*h_double_loop");
    }
}
