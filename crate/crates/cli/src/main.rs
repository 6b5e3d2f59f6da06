//! `pmdlab`: generate instances, run actor-critic experiments, verify traces,
//! sweep step sizes and summarise runs.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

mod report;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use pmdlab_core::trace_io::{read_trace, write_trace};
use pmdlab_core::{
    build_certificate, demo, demo_spec, generate, run_actor_critic, verify_trace, FeatureKind, GenSpec, Instance,
    RunSpec, StepSizeCertificate, VerifyOptions,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const INSTANCE_FILE: &str = "instance.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const VERIFICATION_FILE: &str = "verification.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pmdlab_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "pmdlab", version, about = "Policy mirror descent with linear TD critics on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random instance (or a bundled demo) to <out>/instance.json.
    Gen(GenArgs),
    /// Run the actor-critic scheme and write the trace and certificate.
    Run(RunArgs),
    /// Check every inequality against a trace; exits 1 if any fails.
    Verify(VerifyArgs),
    /// Run a grid over h, lambda and schedule in parallel.
    Sweep(SweepArgs),
    /// Text summary of a run with plot-ready columns.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON file with any of: seed, n_states, n_actions, gamma, tau, features.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// onehot, random_rank or linear_mdp.
    #[arg(long)]
    features: Option<String>,
    /// Feature dimension for random_rank and linear_mdp.
    #[arg(long)]
    rank: Option<usize>,
    /// Write a bundled demo instance and its run config instead.
    #[arg(long, conflicts_with_all = ["config", "seed", "states", "actions", "gamma", "tau", "features", "rank"])]
    demo: Option<String>,
}

/// Overrides for keys of the run config file.
#[derive(Args, Clone, Default)]
pub struct RunOverrides {
    /// A number, or FACTOR*THRESHOLD such as 0.9*h_double_loop.
    #[arg(long)]
    pub h: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub enforce_certificate: bool,
    /// Do not store per-step inner errors (enables the fast inner loop).
    #[arg(long)]
    pub no_inner_errors: bool,
    #[arg(long)]
    pub stepwise_inner: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: RunOverrides,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Directory holding trace.csv and trace.json; verification.json is written there.
    #[arg(long)]
    out: PathBuf,
    /// Include per-iteration margins.
    #[arg(long)]
    details: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Parallel runs; defaults to the number of CPUs.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Run directory; report.txt is written there.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Sweep(args) => sweep::cmd_sweep(&args.instance, &args.config, &args.out, args.workers),
        Command::Report(args) => report::cmd_report(&args.instance, &args.out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

pub fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn load_instance(path: &Path) -> CliResult<Instance> {
    let text = read_file(path)?;
    Instance::from_json_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Parses a JSON config file, naming the file in errors.
pub fn load_json_object(path: &Path) -> CliResult<Map<String, Value>> {
    let text = read_file(path)?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

/// `0.5` or `0.9*h_double_loop` as the JSON form of a step size.
pub fn parse_step(text: &str) -> CliResult<Value> {
    if let Ok(h) = text.trim().parse::<f64>() {
        return Ok(Value::from(h));
    }
    let bad = || CliError::Usage(format!("--h {text}: expected a number or FACTOR*THRESHOLD"));
    let (factor, of) = text.split_once('*').ok_or_else(bad)?;
    let factor: f64 = factor.trim().parse().map_err(|_| bad())?;
    Ok(serde_json::json!({ "factor": factor, "of": of.trim() }))
}

impl RunOverrides {
    pub fn apply(&self, map: &mut Map<String, Value>) -> CliResult<()> {
        if let Some(h) = &self.h {
            map.insert("h".into(), parse_step(h)?);
        }
        if let Some(l) = self.lambda {
            map.insert("lambda".into(), Value::from(l));
        }
        if let Some(n) = self.updates {
            map.insert("n_policy_updates".into(), Value::from(n));
        }
        if self.enforce_certificate {
            map.insert("enforce_certificate".into(), Value::Bool(true));
        }
        if self.no_inner_errors {
            map.insert("record_inner_errors".into(), Value::Bool(false));
        }
        if self.stepwise_inner {
            map.insert("stepwise_inner".into(), Value::Bool(true));
        }
        Ok(())
    }
}

fn spec_from_map(map: Map<String, Value>, origin: &str) -> CliResult<RunSpec> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(format!("{origin}: {e}")))
}

#[derive(Serialize)]
struct CertificateFile<'a> {
    certificate: &'a StepSizeCertificate,
    flags: pmdlab_core::CertificateFlags,
    h: f64,
    lambda: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenFile {
    seed: Option<u64>,
    n_states: Option<usize>,
    n_actions: Option<usize>,
    gamma: Option<f64>,
    tau: Option<f64>,
    features: Option<FeatureKind>,
}

fn feature_kind(name: &str, rank: Option<usize>) -> CliResult<FeatureKind> {
    let need_rank = || rank.ok_or_else(|| CliError::Usage(format!("--features {name} needs --rank")));
    match name {
        "onehot" => Ok(FeatureKind::Onehot),
        "random_rank" => Ok(FeatureKind::RandomRank { k: need_rank()? }),
        "linear_mdp" => Ok(FeatureKind::LinearMdp { k: need_rank()? }),
        other => Err(CliError::Usage(format!("unknown feature kind '{other}' (onehot, random_rank, linear_mdp)"))),
    }
}

fn cmd_gen(args: &GenArgs) -> CliResult<u8> {
    create_dir(&args.out)?;
    if let Some(name) = &args.demo {
        let inst = demo(name).map_err(|e| CliError::Usage(e.to_string()))?;
        write_file(&args.out.join(INSTANCE_FILE), &inst.to_json_pretty()?)?;
        let spec = demo_spec(name)?;
        write_file(&args.out.join(CONFIG_FILE), &serde_json::to_string_pretty(&spec)?)?;
        info!("wrote demo {name} to {}", args.out.display());
        return Ok(0);
    }
    let file: GenFile = match &args.config {
        Some(path) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => GenFile::default(),
    };
    let missing = |key: &str| CliError::Usage(format!("missing {key} (flag or config key)"));
    let features = match &args.features {
        Some(name) => feature_kind(name, args.rank)?,
        None => file.features.unwrap_or(FeatureKind::Onehot),
    };
    let spec = GenSpec {
        n_states: args.states.or(file.n_states).ok_or_else(|| missing("n_states"))?,
        n_actions: args.actions.or(file.n_actions).ok_or_else(|| missing("n_actions"))?,
        gamma: args.gamma.or(file.gamma).ok_or_else(|| missing("gamma"))?,
        tau: args.tau.or(file.tau).ok_or_else(|| missing("tau"))?,
        features,
    };
    let seed = args.seed.or(file.seed).ok_or_else(|| missing("seed"))?;
    let inst = generate(&spec, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = args.out.join(INSTANCE_FILE);
    write_file(&path, &inst.to_json_pretty()?)?;
    let cert = build_certificate(&inst.mdp, &inst.features)?;
    println!(
        "wrote {} ({} states, {} actions, {} features, lambda_beta = {:e})",
        path.display(),
        inst.mdp.n_states,
        inst.mdp.n_actions,
        inst.features.dim,
        cert.lambda_beta
    );
    Ok(0)
}

fn cmd_run(args: &RunArgs) -> CliResult<u8> {
    let inst = load_instance(&args.instance)?;
    let (mut map, origin) = match &args.config {
        Some(path) => (load_json_object(path)?, path.display().to_string()),
        None => (Map::new(), "flags".to_string()),
    };
    args.overrides.apply(&mut map)?;
    let spec = spec_from_map(map, &origin)?;
    let config = spec.resolve(&inst)?;
    let cert = build_certificate(&inst.mdp, &inst.features)?;
    info!("h = {:e}, lambda = {}, schedule = {:?}", config.h, config.lambda, config.schedule);
    let trace = run_actor_critic(&inst.mdp, &inst.features, &config)?;
    create_dir(&args.out)?;
    write_trace(&trace, &args.out)?;
    let file = CertificateFile {
        certificate: &cert,
        flags: cert.evaluate(config.h, config.lambda),
        h: config.h,
        lambda: config.lambda,
    };
    write_file(&args.out.join(CERTIFICATE_FILE), &serde_json::to_string_pretty(&file)?)?;
    for w in &trace.meta.warnings {
        warn!("{w}");
    }
    match &trace.meta.abort {
        Some(a) => println!("run aborted at n = {}: {} = {:e}", a.n, a.quantity, a.value),
        None => println!(
            "completed {} updates, final gap {:e}",
            trace.records.len(),
            trace.final_state.as_ref().map_or(f64::NAN, |f| f.gap)
        ),
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<u8> {
    let inst = load_instance(&args.instance)?;
    let trace = read_trace(&args.out).map_err(|e| CliError::Usage(format!("{}: {e}", args.out.display())))?;
    let report = verify_trace(&trace, &inst.mdp, &inst.features, VerifyOptions { details: args.details })
        .map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&args.out.join(VERIFICATION_FILE), &serde_json::to_string_pretty(&report)?)?;
    for c in &report.checks {
        let status = serde_json::to_value(c.status)?;
        let tail = match (&c.skip_reason, c.first_violation_n) {
            (Some(reason), _) => format!(" ({reason})"),
            (None, Some(n)) => format!(" (first violation at n = {n}, margin {:e})", c.worst_margin),
            (None, None) => String::new(),
        };
        println!("{:<30} {}{tail}", c.check_name, status.as_str().unwrap_or("?"));
    }
    println!("{}", if report.passed { "all checks passed" } else { "verification FAILED" });
    Ok(report.exit_code() as u8)
}
