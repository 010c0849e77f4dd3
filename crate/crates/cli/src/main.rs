//! `hmpc`: run scenarios, verify evidence bundles and inspect event logs.

mod inspect;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmpc_core::chain::{verify_bundle, BundleVerdict, EvidenceBundle};
use hmpc_core::sim::{self, Scenario, SimError};

/// Exit codes: 0 success or accept, 1 reject or inconsistent log, 2 bad
/// input, 3 liveness stall.
#[derive(Parser)]
#[command(name = "hmpc", version, about = "Hyperedge multi-party payment channel simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, metrics.json and events.jsonl.
    Run {
        scenario: PathBuf,
        /// Replaces the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
    },
    /// Check a serialized proof, fraud evidence or finalized root.
    Verify { file: PathBuf },
    /// Summarize an events.jsonl log.
    Inspect {
        log: PathBuf,
        /// Only this root sequence and the batch that produced it.
        #[arg(long)]
        root: Option<u64>,
        /// Balance timeline of one participant.
        #[arg(long)]
        participant: Option<u32>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, seed, out, format } => run(&scenario, seed, &out, format),
        Command::Verify { file } => verify(&file),
        Command::Inspect { log, root, participant } => match inspect::inspect(&log, root, participant) {
            Ok(report) => {
                print!("{}", report.text);
                if report.consistent {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}

fn run(path: &Path, seed: Option<u64>, out: &Path, format: Format) -> ExitCode {
    let mut sc = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    let report = match sim::run(&sc) {
        Ok(r) => r,
        Err(e @ SimError::LivenessStall { .. }) => {
            eprintln!("stall: {e}");
            return ExitCode::from(3);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let csv = format != Format::Json;
    let json = format != Format::Csv;
    if let Err(e) = report.write(out, csv, json) {
        eprintln!("error: writing {}: {e}", out.display());
        return ExitCode::from(2);
    }
    println!("{}", report.summary_line());
    let v = report.safety.violations();
    if v > 0 {
        eprintln!("warning: {v} safety violations, see metrics.json");
    }
    ExitCode::SUCCESS
}

fn verify(path: &Path) -> ExitCode {
    let bundle: EvidenceBundle = match std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    match verify_bundle(&bundle) {
        BundleVerdict::Accept { detail } => {
            println!("accept {detail}");
            ExitCode::SUCCESS
        }
        BundleVerdict::Reject { rule, detail } => {
            println!("reject {rule}: {detail}");
            ExitCode::from(1)
        }
    }
}
