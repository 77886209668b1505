use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedconf::accounting::{self, NoiseConfig, PrivacyBudget, REPORTING_DELTA};
use fedconf::ledger;
use fedconf::orchestrator::{run_pipeline, RunStatus, SimConfig, TraceEvent};
use fedconf::policy::{self, format_sig6, AccessPolicy};
use fedconf::training::{self, generate_synthetic_data, TrainingConfig};
use serde::Deserialize;
use thiserror::Error;

/// Environment variable that replaces the manifest seed.
const SEED_ENV: &str = "FEDCONF_SEED";

#[derive(Debug, Error)]
enum CliError {
    /// Bad input: unreadable or unparseable files, inconsistent flags.
    #[error("{0}")]
    Usage(String),
    /// The input was understood and the answer is no.
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Domain(_) => ExitCode::from(1),
            CliError::Usage(_) => ExitCode::from(2),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "fedconf", version, about = "Confidential federated training pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect an access policy file.
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Run a training pipeline from a manifest.
    Run {
        manifest: PathBuf,
        /// Write artifacts here instead of the manifest's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check an exported audit log.
    Audit {
        #[command(subcommand)]
        action: AuditAction,
    },
    /// Convert privacy budgets.
    Accountant(AccountantArgs),
    /// Summarize an exported trace round by round.
    Replay { trace: PathBuf },
}

#[derive(Subcommand)]
enum PolicyAction {
    Validate { path: PathBuf },
    Summarize { path: PathBuf },
    Hash { path: PathBuf },
}

#[derive(Subcommand)]
enum AuditAction {
    Verify { path: PathBuf },
}

#[derive(Args)]
struct AccountantArgs {
    /// Convert this zCDP rho directly.
    #[arg(long, conflicts_with_all = ["tree", "sigma", "clip"], required_unless_present = "tree")]
    rho: Option<f64>,
    /// Rounds of tree aggregation.
    #[arg(long, requires_all = ["sigma", "clip"])]
    tree: Option<u64>,
    /// Noise multiplier.
    #[arg(long, requires = "tree")]
    sigma: Option<f64>,
    /// Clipping norm.
    #[arg(long, requires = "tree")]
    clip: Option<f64>,
    #[arg(long, default_value_t = REPORTING_DELTA)]
    delta: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Policy { action } => cmd_policy(action),
        Command::Run {
            manifest,
            output_dir,
        } => cmd_run(&manifest, output_dir),
        Command::Audit {
            action: AuditAction::Verify { path },
        } => cmd_audit_verify(&path),
        Command::Accountant(args) => cmd_accountant(&args),
        Command::Replay { trace } => cmd_replay(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_policy(path: &Path) -> Result<AccessPolicy, CliError> {
    AccessPolicy::from_json(&read(path)?)
        .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", path.display())))
}

fn cmd_policy(action: PolicyAction) -> CliResult {
    match action {
        PolicyAction::Validate { path } => {
            let report = policy::validate(&load_policy(&path)?);
            if report.is_ok() {
                println!("ok");
                return Ok(());
            }
            for d in &report.diagnostics {
                println!("{}: {}", d.code, d.message);
            }
            Err(CliError::Domain(format!(
                "{} diagnostic(s)",
                report.diagnostics.len()
            )))
        }
        PolicyAction::Summarize { path } => {
            let text = policy::summarize(&load_policy(&path)?)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
        PolicyAction::Hash { path } => {
            let h = policy::hash(&load_policy(&path)?)
                .map_err(|e| CliError::Domain(e.to_string()))?;
            println!("{}", h.to_hex());
            Ok(())
        }
    }
}

fn cmd_audit_verify(path: &Path) -> CliResult {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    for (i, line) in text.lines().enumerate() {
        serde_json::from_str::<serde_json::Value>(line)
            .map_err(|e| CliError::Usage(format!("line {}: {e}", i + 1)))?;
    }
    match ledger::verify_audit_jsonl(&text) {
        Ok(n) => {
            println!("ok: {n} records");
            Ok(())
        }
        Err(b) => {
            println!("broken at record {}: {}", b.index, b.detail);
            Err(CliError::Domain(format!("audit chain broken at record {}", b.index)))
        }
    }
}

fn print_budget(rho: f64, delta: f64) -> CliResult {
    let eps = accounting::zcdp_to_epsilon(rho, delta).map_err(|e| CliError::Usage(e.to_string()))?;
    let loose = accounting::loose_epsilon(rho, delta);
    println!("rho={}", format_sig6(rho));
    println!("delta={delta:e}");
    println!("epsilon={}", format_sig6(eps));
    println!("epsilon_loose={}", format_sig6(loose));
    Ok(())
}

fn cmd_accountant(args: &AccountantArgs) -> CliResult {
    if !(args.delta > 0.0 && args.delta < 1.0) {
        return Err(CliError::Usage("--delta must lie in (0, 1)".into()));
    }
    let rho = match (args.rho, args.tree) {
        (Some(rho), None) => rho,
        (None, Some(rounds)) => {
            let cfg = NoiseConfig::new(
                args.clip.expect("clap requires clip"),
                args.sigma.expect("clap requires sigma"),
                rounds,
            );
            match accounting::tree_zcdp(&cfg).map_err(|e| CliError::Usage(e.to_string()))? {
                PrivacyBudget::Rho(r) => r,
                PrivacyBudget::Unbounded => {
                    println!("rho=unbounded");
                    return Err(CliError::Domain("zero noise gives no guarantee".into()));
                }
            }
        }
        _ => return Err(CliError::Usage("give either --rho or --tree".into())),
    };
    print_budget(rho, args.delta)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunManifest {
    policy: PathBuf,
    training: PathBuf,
    output_dir: PathBuf,
    seed: Option<u64>,
    max_ticks: Option<u64>,
    #[serde(default)]
    simulation: SimConfig,
}

/// Paths in a manifest are relative to the manifest's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Usage(format!("cannot write {name}: {e}"));
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, dir.join(name)).map_err(io)
}

fn cmd_run(manifest_path: &Path, output_dir: Option<PathBuf>) -> CliResult {
    let manifest: RunManifest = serde_json::from_slice(&read(manifest_path)?)
        .map_err(|e| CliError::Usage(format!("cannot parse manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let policy = load_policy(&resolve(base, &manifest.policy))?;
    let training_path = resolve(base, &manifest.training);
    let mut config = TrainingConfig::from_json(&read(&training_path)?)
        .map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", training_path.display())))?;
    if let Some(seed) = seed_override()?.or(manifest.seed) {
        config.seed = seed;
    }
    let mut sim = manifest.simulation;
    if let Some(t) = manifest.max_ticks {
        sim.max_ticks = t;
    }
    let out_dir = output_dir.unwrap_or_else(|| resolve(base, &manifest.output_dir));

    // Everything that can be refused is refused before any file is written.
    let domain = |e: training::TrainingError| CliError::Domain(format!("{}: {e}", e.code()));
    training::plan(&config, &policy).map_err(domain)?;
    let data = generate_synthetic_data(config.seed, &config.data).map_err(domain)?;
    let outcome = run_pipeline(&config, &policy, &data, &sim).map_err(domain)?;

    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;
    write_atomic(&out_dir, "metrics.csv", outcome.metrics.to_csv().as_bytes())?;
    write_atomic(&out_dir, "audit.jsonl", outcome.audit_jsonl.as_bytes())?;
    write_atomic(&out_dir, "trace.jsonl", outcome.trace_jsonl().as_bytes())?;

    let accuracy = outcome
        .metrics
        .final_accuracy()
        .map_or("n/a".to_owned(), format_sig6);
    let (rho, eps) = match outcome.rho_reported {
        PrivacyBudget::Rho(r) => {
            let e = outcome
                .rho_reported
                .epsilon(REPORTING_DELTA)
                .ok()
                .flatten()
                .map_or("n/a".to_owned(), format_sig6);
            (format_sig6(r), e)
        }
        PrivacyBudget::Unbounded => ("unbounded".to_owned(), "inf".to_owned()),
    };
    println!("rounds_released={}", outcome.metrics.rows.len());
    println!("rounds_aborted={}", outcome.metrics.aborted.len());
    println!("accuracy={accuracy}");
    println!("rho={rho}");
    println!("epsilon={eps} (delta=1e-10)");
    println!("artifacts={}", out_dir.display());
    match outcome.status {
        RunStatus::Complete => Ok(()),
        RunStatus::Incomplete => Err(CliError::Domain(format!(
            "run incomplete at tick {}",
            outcome.end_tick
        ))),
    }
}

fn cmd_replay(path: &Path) -> CliResult {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let e: TraceEvent = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("line {}: {e}", i + 1)))?;
        events.push(e);
    }
    let uploads = events
        .iter()
        .filter(|e| e.kind == "device_upload" && e.outcome.starts_with("deposited"))
        .count();
    println!("events={} uploads={uploads}", events.len());
    for e in &events {
        let Some(round) = e.round else { continue };
        match e.kind.as_str() {
            "round_start" => println!("round {round}: start tick={} {}", e.tick, e.outcome),
            "release" => println!("round {round}: released tick={}", e.tick),
            "round_aborted" => println!("round {round}: aborted tick={} reason={}", e.tick, e.outcome),
            _ => {}
        }
    }
    if let Some(end) = events.iter().rev().find(|e| e.kind == "run_end") {
        println!("end tick={} status={}", end.tick, end.outcome);
    }
    Ok(())
}
