use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridtrust::report::build_report;
use gridtrust::sim::{run, MetricsTrace, Scenario, SimError};

#[derive(Parser)]
#[command(
    name = "gridtrust",
    version,
    about = "Simulate trust management across grid domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every violation.
    Validate {
        scenario: PathBuf,
        /// Override a scenario key, e.g. `trust.alpha=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a scenario and write its trace, journal and summary.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Aggregate a trace into trust, allocation and feedback tables.
    Report {
        trace: PathBuf,
        /// Number of equal time windows for allocation shares.
        #[arg(long, default_value_t = 10)]
        windows: usize,
        /// Emit JSON instead of text tables.
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn exit(self) -> ExitCode {
        match self {
            Failure::Invalid(msg) => {
                eprintln!("{msg}");
                ExitCode::from(1)
            }
            Failure::Runtime(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { scenario, set } => load(&scenario, &set).map(|_| println!("OK")),
        Command::Run {
            scenario,
            seed,
            set,
            out,
        } => cmd_run(&scenario, seed, &set, &out),
        Command::Report {
            trace,
            windows,
            json,
        } => cmd_report(&trace, windows, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.exit(),
    }
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, Failure> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect()
}

fn load(path: &Path, set: &[String]) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let overrides = parse_overrides(set)?;
    Scenario::from_toml(&text, &overrides)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn cmd_run(path: &Path, seed: Option<u64>, set: &[String], out: &Path) -> Result<(), Failure> {
    let mut scenario = load(path, set)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let output = run(&scenario).map_err(|e| match e {
        SimError::Scenario(e) => Failure::Invalid(e.to_string()),
        e => Failure::Runtime(e.to_string()),
    })?;
    let summary_json = serde_json::to_string_pretty(&output.summary).expect("summary serialises");
    let files = [
        ("trace.jsonl", output.trace.to_jsonl()),
        ("trace.log", output.trace.to_log()),
        ("trust_updates.csv", output.trace.to_csv()),
        ("journal.log", output.store.journal.render()),
        ("summary.json", summary_json + "\n"),
        ("summary.txt", output.summary.render()),
    ];
    write_all(out, &files).map_err(Failure::Runtime)?;
    emit(&format!(
        "{}\nwrote {} files to {}\n",
        output.summary.render(),
        files.len(),
        out.display()
    ));
    Ok(())
}

/// Writes every file or none: contents go to temporary names first and are
/// renamed only once all of them are on disk.
fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<(), String> {
    let created_dir = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut staged = Vec::new();
    let mut placed = Vec::new();
    let mut attempt = || -> Result<(), String> {
        for (name, body) in files {
            let tmp = dir.join(format!(".{name}.partial"));
            staged.push(tmp.clone());
            fs::write(&tmp, body).map_err(|e| format!("{}: {e}", tmp.display()))?;
        }
        for ((name, _), tmp) in files.iter().zip(&staged) {
            let dest = dir.join(name);
            fs::rename(tmp, &dest).map_err(|e| format!("{}: {e}", dest.display()))?;
            placed.push(dest);
        }
        Ok(())
    };
    let result = attempt();
    if result.is_err() {
        for p in staged.iter().chain(&placed) {
            let _ = fs::remove_file(p);
        }
        if created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
    result
}

fn cmd_report(path: &Path, windows: usize, json: bool) -> Result<(), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let trace = MetricsTrace::parse_jsonl(&text)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let report = build_report(&trace, windows);
    if json {
        emit(&(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"));
    } else {
        emit(&report.render());
    }
    Ok(())
}

/// Writes to stdout, tolerating a reader that went away (`| head`).
fn emit(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}
