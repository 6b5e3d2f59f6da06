//! On-disk trace format: a CSV with one row per policy update plus a JSON
//! sidecar holding the run metadata, per-iteration arrays and the final state.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::driver::{FinalSnapshot, IterationRecord, RunTrace, TraceMeta};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 10] = [
    "n",
    "K_n",
    "theta_norm",
    "l_sup",
    "v_rho",
    "gap",
    "critic_err",
    "critic_err_pre",
    "consec_kl",
    "m_used",
];

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_SIDECAR: &str = "trace.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SidecarRow {
    n: usize,
    inner_errors: Vec<f64>,
    inner_grad_sq: Vec<f64>,
    v_states: Vec<f64>,
    q_sup: f64,
    q_diff: f64,
    realisability_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    meta: TraceMeta,
    iterations: Vec<SidecarRow>,
    final_state: Option<FinalSnapshot>,
}

pub fn write_csv<W: Write>(trace: &RunTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in &trace.records {
        w.write_record([
            r.n.to_string(),
            r.k_n.to_string(),
            r.theta_norm.to_string(),
            r.l_sup.to_string(),
            r.v_rho.to_string(),
            r.gap.to_string(),
            r.critic_err.to_string(),
            r.critic_err_pre.to_string(),
            r.consec_kl.to_string(),
            r.m_used.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sidecar<W: Write>(trace: &RunTrace, out: W) -> Result<()> {
    let sidecar = Sidecar {
        meta: trace.meta.clone(),
        iterations: trace
            .records
            .iter()
            .map(|r| SidecarRow {
                n: r.n,
                inner_errors: r.inner_errors.clone(),
                inner_grad_sq: r.inner_grad_sq.clone(),
                v_states: r.v_states.clone(),
                q_sup: r.q_sup,
                q_diff: r.q_diff,
                realisability_residual: r.realisability_residual,
            })
            .collect(),
        final_state: trace.final_state.clone(),
    };
    serde_json::to_writer(out, &sidecar)?;
    Ok(())
}

/// Writes `trace.csv` and `trace.json` into `dir`.
pub fn write_trace(trace: &RunTrace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(trace, std::io::BufWriter::new(std::fs::File::create(dir.join(TRACE_CSV))?))?;
    write_sidecar(trace, std::io::BufWriter::new(std::fs::File::create(dir.join(TRACE_SIDECAR))?))?;
    Ok(())
}

struct CsvRow {
    n: usize,
    values: [f64; 8],
    m_used: usize,
}

fn parse_field<T: std::str::FromStr>(text: &str, column: &str, line: usize) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| Error::Schema(format!("line {line}: column '{column}' has unparsable value '{text}'")))
}

fn read_csv_rows<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let mut cols = [0usize; 10];
    for (k, name) in CSV_COLUMNS.iter().enumerate() {
        cols[k] = *index
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))?;
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let get = |k: usize| -> Result<&str> {
            rec.get(cols[k])
                .ok_or_else(|| Error::Schema(format!("line {line}: missing value for column '{}'", CSV_COLUMNS[k])))
        };
        let mut values = [0.0; 8];
        for (j, v) in values.iter_mut().enumerate() {
            *v = parse_field(get(j + 1)?, CSV_COLUMNS[j + 1], line)?;
        }
        rows.push(CsvRow { n: parse_field(get(0)?, "n", line)?, values, m_used: parse_field(get(9)?, "m_used", line)? });
    }
    Ok(rows)
}

/// Reassembles a trace from its CSV and sidecar.
pub fn read_trace_from<R1: Read, R2: Read>(csv_in: R1, sidecar_in: R2) -> Result<RunTrace> {
    let rows = read_csv_rows(csv_in)?;
    let sidecar: Sidecar = serde_json::from_reader(sidecar_in)?;
    if rows.len() != sidecar.iterations.len() {
        return Err(Error::Schema(format!(
            "CSV has {} rows but the sidecar has {} iterations",
            rows.len(),
            sidecar.iterations.len()
        )));
    }
    let mut records = Vec::with_capacity(rows.len());
    for (i, (row, side)) in rows.into_iter().zip(sidecar.iterations).enumerate() {
        if row.n != i || side.n != i {
            return Err(Error::Schema(format!("row {i} has n = {} (sidecar n = {})", row.n, side.n)));
        }
        let [k_n, theta_norm, l_sup, v_rho, gap, critic_err, critic_err_pre, consec_kl] = row.values;
        records.push(IterationRecord {
            n: row.n,
            k_n,
            theta_norm,
            l_sup,
            v_rho,
            gap,
            critic_err,
            critic_err_pre,
            consec_kl,
            m_used: row.m_used,
            inner_errors: side.inner_errors,
            inner_grad_sq: side.inner_grad_sq,
            v_states: side.v_states,
            q_sup: side.q_sup,
            q_diff: side.q_diff,
            realisability_residual: side.realisability_residual,
        });
    }
    Ok(RunTrace { meta: sidecar.meta, records, final_state: sidecar.final_state })
}

pub fn read_trace(dir: &Path) -> Result<RunTrace> {
    let csv_path = dir.join(TRACE_CSV);
    let side_path = dir.join(TRACE_SIDECAR);
    read_trace_from(
        std::io::BufReader::new(std::fs::File::open(&csv_path)?),
        std::io::BufReader::new(std::fs::File::open(&side_path)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_column_is_named() {
        let text = "n,K_n,theta_norm,l_sup,v_rho,gap,critic_err,critic_err_pre,m_used\n0,0,0,0,0,0,0,0,1\n";
        match read_csv_rows(text.as_bytes()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("consec_kl"), "{msg}"),
            other => panic!("expected schema error, got {:?}", other.err()),
        }
    }

    #[test]
    fn bad_value_reports_line() {
        let text = format!("{}\n0,0,0,0,0,x,0,0,0,1\n", CSV_COLUMNS.join(","));
        match read_csv_rows(text.as_bytes()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("line 2") && msg.contains("gap"), "{msg}"),
            other => panic!("expected schema error, got {:?}", other.err()),
        }
    }
}
