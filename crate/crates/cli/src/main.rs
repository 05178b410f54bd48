mod selftest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fallsafe_core::config::Config;
use fallsafe_core::detector::{Detector, ScoreFn, ScoreKind};
use fallsafe_core::embedding::{build_nominal_cache, format_embeddings};
use fallsafe_core::reasoner::{RemoteReasoner, ENDPOINT_ENV};
use fallsafe_core::sim::{
    evaluate, generate_scenarios, named_scenario, run_suite, trace_csv, trace_summary, Method, Metrics, SimError,
    Simulator,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "fallsafe", version, about = "Fallback-safe contingency MPC with an anomaly monitor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the nominal combination cache and calibrate the threshold.
    Calibrate(CalibrateArgs),
    /// Run one closed-loop episode and write its trace.
    Simulate(SimulateArgs),
    /// Run every method over the same scenario list.
    Ablate(AblateArgs),
    /// Check the solver, the shipped recovery regions and calibration.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct Common {
    /// Config JSON; the shipped quadrotor config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    MaxCos,
    TopK,
    Mahalanobis,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// One concept per line; the config vocabulary when omitted.
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    #[arg(long, value_enum)]
    score_fn: Option<ScoreArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    #[arg(long)]
    max_combo: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Output directory for `detector.json` and `cache.emb`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "aesop", value_parser = parse_method)]
    method: Method,
    /// Named scenario from the config; otherwise one is drawn from the seed.
    #[arg(long)]
    scenario: Option<String>,
    /// Query the remote reasoner named by the endpoint variable.
    #[arg(long)]
    remote: bool,
    /// Output directory for `trace.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for `ablation.csv` and `ablation.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

/// Errors in the user's input rather than in the program.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl Into<anyhow::Error>) -> anyhow::Error {
    UsageError(e.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())).map_err(usage)?,
        None => Config::shipped(),
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn sim_error(e: SimError) -> anyhow::Error {
    match e {
        SimError::Config(_) | SimError::Precondition(_) | SimError::Scenario(_) => usage(e),
        other => other.into(),
    }
}

/// Writes to a sibling temp file and renames it over the target.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let det = &cfg.detector;
    let vocabulary: Vec<String> = match &args.vocabulary {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(usage)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => det.vocabulary.clone(),
    };
    let kind = match args.score_fn {
        Some(ScoreArg::MaxCos) => ScoreKind::MaxCos,
        Some(ScoreArg::TopK) => ScoreKind::TopK,
        Some(ScoreArg::Mahalanobis) => ScoreKind::Mahalanobis,
        None => det.score_fn,
    };
    let score_fn = ScoreFn::from_parts(kind, args.k.unwrap_or(det.k)).map_err(usage)?;
    let alpha = args.alpha.unwrap_or(det.alpha);
    let dim = args.dim.unwrap_or(det.dim);
    let seed = args.common.seed.unwrap_or(det.seed);
    let max_combo = args.max_combo.unwrap_or(det.max_combo);

    let cache = build_nominal_cache(&vocabulary, max_combo, dim, seed, det.budget).map_err(usage)?;
    let detector = Detector::calibrate(cache, score_fn, alpha).map_err(usage)?;
    create_dir(&args.out)?;
    write_atomic(&args.out.join("cache.emb"), &format_embeddings(detector.cache()))?;
    let file = detector.to_file("cache.emb");
    write_atomic(&args.out.join("detector.json"), &serde_json::to_string_pretty(&file)?)?;
    println!("N = {}", detector.cache().len());
    println!("dim = {}", detector.cache().dim());
    println!("tau = {:.12}", detector.tau());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(0);
    let scenario = match &args.scenario {
        Some(name) => named_scenario(&cfg, name, seed).ok_or_else(|| {
            let known: Vec<&str> = cfg.scenarios.named.keys().map(String::as_str).collect();
            usage(anyhow::anyhow!("no scenario named {name:?}; known: {}", known.join(", ")))
        })?,
        None => generate_scenarios(1, &cfg, seed).map_err(sim_error)?.remove(0),
    };
    let labels: Vec<String> = cfg.regions().map_err(usage)?.into_iter().map(|r| r.label).collect();
    let max_tokens = cfg.reasoner.max_tokens;
    let mut sim = Simulator::new(cfg).map_err(sim_error)?;
    let run = if args.remote {
        let Some(mut remote) = RemoteReasoner::from_env(labels, max_tokens) else {
            bail!(UsageError(anyhow::anyhow!("--remote needs {ENDPOINT_ENV} to be set")));
        };
        sim.run(args.method, &scenario, &mut remote)
    } else {
        sim.run_mock(args.method, &scenario)
    }
    .map_err(sim_error)?;

    create_dir(&args.out)?;
    write_atomic(&args.out.join("trace.csv"), &trace_csv(&run.trace))?;
    let summary = trace_summary(&run.trace);
    write_atomic(&args.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    let name = scenario.name.as_deref().unwrap_or("generated");
    println!("{} on {name}: {} after {} ticks", args.method, run.trace.outcome.name(), summary.ticks);
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

/// Ablation row without wall-clock fields, so files are reproducible.
#[derive(Serialize)]
struct AblationRow {
    method: Method,
    n: usize,
    consequential: usize,
    recovered: usize,
    recovery_rate: f64,
    violations: usize,
    constraint_violation_ticks: usize,
    outcomes: std::collections::BTreeMap<String, usize>,
    mean_speed: f64,
}

impl From<&Metrics> for AblationRow {
    fn from(m: &Metrics) -> Self {
        Self {
            method: m.method,
            n: m.n,
            consequential: m.consequential,
            recovered: m.recovered,
            recovery_rate: m.recovery_rate,
            violations: m.violations,
            constraint_violation_ticks: m.constraint_violation_ticks,
            outcomes: m.outcomes.clone(),
            mean_speed: m.mean_speed,
        }
    }
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(0);
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        bail!(UsageError(anyhow::anyhow!("--jobs must be at least 1")));
    }
    let mpc = cfg.mpc_config().map_err(usage)?;
    let scenarios = generate_scenarios(args.n as usize, &cfg, seed).map_err(sim_error)?;
    let mut rows = Vec::new();
    for method in Method::ALL {
        let start = Instant::now();
        let runs = run_suite(&cfg, &scenarios, method, jobs).map_err(sim_error)?;
        let m = evaluate(&runs, &mpc)?;
        println!(
            "{method:<6} recovery {:>6.1}% ({}/{}), violated {}, mean solve {:.2} ms, {:.1} s",
            100.0 * m.recovery_rate,
            m.recovered,
            m.consequential,
            m.violations,
            m.mean_solve_ms,
            start.elapsed().as_secs_f64()
        );
        rows.push(AblationRow::from(&m));
    }
    let mut csv = String::from("method,n,consequential,recovered,recovery_rate,violations,constraint_violation_ticks,mean_speed\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{:?},{},{},{:?}\n",
            r.method, r.n, r.consequential, r.recovered, r.recovery_rate, r.violations, r.constraint_violation_ticks, r.mean_speed
        ));
    }
    create_dir(&args.out)?;
    write_atomic(&args.out.join("ablation.csv"), &csv)?;
    write_atomic(&args.out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Simulate(a) => simulate(a),
        Command::Ablate(a) => ablate(a),
        Command::Selftest(a) => selftest::run(a.common.config.as_deref(), a.common.seed.unwrap_or(0)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
