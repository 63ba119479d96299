//! Command-line front end: `validate`, `run` and `replay`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use pilot_core::run::{EXIT_INVALID, EXIT_OK, EXIT_UNFINISHED, EXIT_USAGE};
use pilot_core::{
    emit_metrics, parse_manifest, run_workload, BackendKind, EventLog, ManifestError, MetricsReport, Policy, RunOptions,
};

/// Overrides the directory event logs are written to.
pub const LOG_DIR_ENV: &str = "PILOT_LOG_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "pilot",
    version,
    about = "Run pilot-job workloads on a simulated or local backend"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Check a manifest and list every violation.
    Validate { manifest: PathBuf },
    /// Execute a manifest.
    Run {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendArg,
        /// Overrides the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the metrics report here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyArg::Affinity)]
        policy: PolicyArg,
        /// Local backend: directory for pilot stores and unit sandboxes.
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Deliver every command twice to exercise agent dedupe.
        #[arg(long)]
        inject_duplicates: bool,
    },
    /// Recompute metrics from a saved event log.
    Replay {
        log: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Sim,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Affinity,
    RoundRobin,
}

/// Where the log of a run goes: `$PILOT_LOG_DIR/<name>` when the variable
/// is set (name taken from `--log`, default `events.jsonl`), else `--log`.
pub fn log_destination(flag: Option<&Path>, env_dir: Option<&Path>) -> Option<PathBuf> {
    match env_dir {
        Some(dir) => {
            let name = flag
                .and_then(Path::file_name)
                .map_or_else(|| OsString::from("events.jsonl"), ToOwned::to_owned);
            Some(dir.join(name))
        }
        None => flag.map(Path::to_path_buf),
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match cli.command {
        Cmd::Validate { manifest } => validate(&manifest),
        Cmd::Run {
            manifest,
            backend,
            seed,
            metrics,
            log,
            policy,
            workdir,
            inject_duplicates,
        } => {
            let env_dir = std::env::var_os(LOG_DIR_ENV).map(PathBuf::from);
            let opts = RunOptions {
                backend: Some(match backend {
                    BackendArg::Sim => BackendKind::Sim,
                    BackendArg::Local => BackendKind::Local,
                }),
                policy: match policy {
                    PolicyArg::Affinity => Policy::Affinity,
                    PolicyArg::RoundRobin => Policy::RoundRobin,
                },
                seed,
                workdir,
                source_dir: manifest.parent().map(Path::to_path_buf),
                inject_duplicates,
                ..Default::default()
            };
            run(
                &manifest,
                opts,
                metrics.as_deref(),
                log_destination(log.as_deref(), env_dir.as_deref()),
            )
        }
        Cmd::Replay { log, metrics } => replay(&log, metrics.as_deref()),
    }
}

fn validate(path: &Path) -> i32 {
    match parse_manifest(path) {
        Ok(m) => {
            println!(
                "ok: {} pilots, {} data units, {} compute units",
                m.pilots.len(),
                m.data_units.len(),
                m.compute_units.len()
            );
            EXIT_OK
        }
        Err(ManifestError::Validation(violations)) => {
            for v in violations {
                eprintln!("{}: {v}", path.display());
            }
            EXIT_INVALID
        }
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            EXIT_INVALID
        }
    }
}

fn write_metrics(report: &MetricsReport, dest: Option<&Path>) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(report).expect("metrics serialize");
    match dest {
        Some(path) => std::fs::write(path, text + "\n"),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")
        }
    }
}

fn write_log(log: &EventLog, path: &Path) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    log.write_jsonl(&mut w)?;
    w.flush()
}

fn run(path: &Path, opts: RunOptions, metrics: Option<&Path>, log: Option<PathBuf>) -> i32 {
    let manifest = match parse_manifest(path) {
        Ok(m) => m,
        Err(_) => return validate(path),
    };
    let outcome = match run_workload(&manifest, opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(dest) = &log {
        if let Err(e) = write_log(&outcome.log, dest) {
            eprintln!("error: writing {}: {e}", dest.display());
            return EXIT_UNFINISHED;
        }
    }
    if let Err(e) = write_metrics(&outcome.metrics, metrics) {
        eprintln!("error: writing metrics: {e}");
        return EXIT_UNFINISHED;
    }
    for (cu, reason) in &outcome.metrics.unschedulable {
        eprintln!("unschedulable: {cu} ({reason})");
    }
    if outcome.exceeded {
        eprintln!("run budget of {}s exceeded", outcome.metrics.t_max.unwrap_or(0));
    }
    outcome.exit_code()
}

fn replay(path: &Path, metrics: Option<&Path>) -> i32 {
    let log = match File::open(path)
        .map_err(|e| e.to_string())
        .and_then(|f| EventLog::read_jsonl(BufReader::new(f)).map_err(|e| e.to_string()))
    {
        Ok(log) => log,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    match emit_metrics(&log) {
        Ok(report) => match write_metrics(&report, metrics) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: writing metrics: {e}");
                EXIT_UNFINISHED
            }
        },
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            EXIT_UNFINISHED
        }
    }
}
