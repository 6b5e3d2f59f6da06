//! Human-readable run summary. Summary lines start with `#`; the rest is a
//! whitespace-separated table with one row per iteration, so the file loads
//! directly into plotting tools that skip comment lines.

use std::fmt::Write as _;
use std::path::Path;

use pmdlab_core::trace_io::read_trace;
use pmdlab_core::{verify_trace, CheckStatus, Instance, RunTrace, ScheduleKind, VerificationReport, VerifyOptions};

use crate::{load_instance, write_file, CliError, CliResult};

pub const REPORT_FILE: &str = "report.txt";

pub const COLUMNS: [&str; 11] = [
    "n",
    "m_used",
    "gap",
    "n_min_gap",
    "single_loop_compensated",
    "gap_exp_rate",
    "theta_norm",
    "l_sup",
    "K_n",
    "critic_err",
    "consec_kl",
];

/// Exponent used for the `gap * exp(rate n)` column.
fn linear_rate(trace: &RunTrace, report: &VerificationReport) -> f64 {
    let inverse_xi = 1.0 / report.constants.xi_proof;
    match trace.meta.schedule {
        ScheduleKind::Linear { c } => inverse_xi.min(c),
        _ => inverse_xi,
    }
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.9e}")
    }
}

pub fn render(inst: &Instance, trace: &RunTrace, report: &VerificationReport) -> String {
    let meta = &trace.meta;
    let cert = &report.certificate;
    let mut s = String::new();
    let _ = writeln!(s, "# instance: {} states, {} actions, {} features", inst.mdp.n_states, inst.mdp.n_actions, inst.features.dim);
    let _ = writeln!(s, "# gamma = {}, tau = {}, lambda_beta = {:e}, Gamma = {:e}", meta.gamma, meta.tau, cert.lambda_beta, cert.gamma_const);
    let _ = writeln!(
        s,
        "# thresholds: h_critic_bound = {:e}, h_single_loop = {:e}, h_double_loop = {:e}",
        cert.h_critic_bound, cert.h_single_loop, cert.h_double_loop
    );
    let schedule = serde_json::to_string(&meta.schedule).unwrap_or_default();
    let _ = writeln!(s, "# run: h = {:e}, lambda = {}, eta = {:e}, schedule = {schedule}", meta.h, meta.lambda, meta.eta);
    let f = &report.flags;
    let _ = writeln!(
        s,
        "# flags: h_critic_bound_ok = {}, h_single_loop_ok = {}, h_double_loop_ok = {}, tau_lambda_ok = {}",
        f.h_critic_bound_ok, f.h_single_loop_ok, f.h_double_loop_ok, f.tau_lambda_ok
    );
    let steps: usize = trace.records.iter().map(|r| r.m_used).sum();
    match (&meta.abort, &trace.final_state) {
        (Some(a), _) => {
            let _ = writeln!(s, "# aborted at n = {}: {} = {:e}", a.n, a.quantity, a.value);
        }
        (None, Some(fin)) => {
            let _ = writeln!(s, "# completed {} updates ({steps} TD steps), final gap = {:e}", fin.n, fin.gap);
        }
        (None, None) => {}
    }
    let _ = writeln!(s, "# concentrability xi = {:e}, V*(rho) = {:.12}", report.constants.xi_statement, meta.v_star_rho);
    let _ = writeln!(s, "# verification: {}", if report.passed { "passed" } else { "FAILED" });
    for c in &report.checks {
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "skipped",
        };
        let extra = match (c.status, &c.skip_reason) {
            (CheckStatus::Skipped, Some(r)) => format!(" {r}"),
            (CheckStatus::Fail, _) => format!(" first n = {:?}, margin {:e}", c.first_violation_n, c.worst_margin),
            _ if c.evaluated > 0 => format!(" margin {:e} over {}", c.worst_margin, c.evaluated),
            _ => String::new(),
        };
        let _ = writeln!(s, "#   {:<30} {status}{extra}", c.check_name);
    }
    let rate = linear_rate(trace, report);
    let _ = writeln!(s, "# gap_exp_rate uses rate = {rate:e}; n_min_gap and single_loop_compensated use min over r < n");
    let _ = writeln!(s, "{}", COLUMNS.join(" "));
    let (h, lambda) = (meta.h, meta.lambda);
    let mut min_gap = f64::INFINITY;
    for r in &trace.records {
        let n = r.n as f64;
        let (n_min, single) = if r.n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (n * min_gap, min_gap / (1.0 / (n * h).sqrt() + lambda / h))
        };
        let row = [
            r.n.to_string(),
            r.m_used.to_string(),
            num(r.gap),
            num(n_min),
            num(single),
            num(r.gap * (rate * n).exp()),
            num(r.theta_norm),
            num(r.l_sup),
            num(r.k_n),
            num(r.critic_err),
            num(r.consec_kl),
        ];
        let _ = writeln!(s, "{}", row.join(" "));
        min_gap = min_gap.min(r.gap);
    }
    s
}

pub fn cmd_report(instance: &Path, out: &Path) -> CliResult<u8> {
    let inst = load_instance(instance)?;
    let trace = read_trace(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    let report = verify_trace(&trace, &inst.mdp, &inst.features, VerifyOptions::default())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let text = render(&inst, &trace, &report);
    let path = out.join(REPORT_FILE);
    write_file(&path, &text)?;
    println!("wrote {}", path.display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmdlab_core::{build_certificate, demo, run_actor_critic, RunConfig};

    #[test]
    fn table_has_one_row_per_update_and_fixed_width() {
        let inst = demo("cycle2").unwrap();
        let cert = build_certificate(&inst.mdp, &inst.features).unwrap();
        let config = RunConfig::new(cert.h_critic_bound, 1.0, 7, ScheduleKind::SingleLoop);
        let trace = run_actor_critic(&inst.mdp, &inst.features, &config).unwrap();
        let report = verify_trace(&trace, &inst.mdp, &inst.features, VerifyOptions::default()).unwrap();
        let text = render(&inst, &trace, &report);
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], COLUMNS.join(" "));
        assert_eq!(rows.len(), 8);
        assert!(rows[1..].iter().all(|r| r.split(' ').count() == COLUMNS.len()));
        // n * min_{r < n} gap_r at n = 1 is gap_0.
        let gap0: f64 = rows[1].split(' ').nth(2).unwrap().parse().unwrap();
        let comp1: f64 = rows[2].split(' ').nth(3).unwrap().parse().unwrap();
        assert!((gap0 - comp1).abs() <= 1e-9 * gap0.abs());
    }
}
