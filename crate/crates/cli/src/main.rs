//! `aqm`: runs named simulation experiments from JSON scenario files.

mod experiments;
mod run;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use scenario::{Diagnostic, Scenario};

#[derive(Parser)]
#[command(name = "aqm", version, about = "Accidental quantum measurement of bystander trapped-ion qubits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write <experiment>.csv plus a <experiment>.json sidecar.
    Run {
        scenario: PathBuf,
        /// Output directory; overrides the scenario's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; output does not depend on this.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        workers: u64,
    },
    /// Check a scenario without running it. Prints diagnostics as JSON.
    Validate { scenario: PathBuf },
    /// List the experiments.
    List,
}

fn fail(kind: &str, message: impl Into<String>, diagnostics: &[Diagnostic]) -> ExitCode {
    let body = json!({"error": kind, "message": message.into(), "diagnostics": diagnostics});
    eprintln!("{body}");
    ExitCode::from(if kind == "invalid_scenario" { 2 } else { 1 })
}

fn load(path: &PathBuf) -> Result<Scenario, ExitCode> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail("io", format!("cannot read {}: {e}", path.display()), &[]))?;
    Scenario::parse(&text).map_err(|d| fail("invalid_scenario", format!("{} is not a valid scenario", path.display()), &d))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for e in &experiments::ALL {
                println!("{:<14}{}", e.name, e.description);
            }
            ExitCode::SUCCESS
        }
        Command::Validate { scenario } => {
            let diagnostics = match std::fs::read_to_string(&scenario) {
                Ok(text) => Scenario::parse(&text).err().unwrap_or_default(),
                Err(e) => return fail("io", format!("cannot read {}: {e}", scenario.display()), &[]),
            };
            println!("{}", json!({"valid": diagnostics.is_empty(), "diagnostics": diagnostics}));
            if diagnostics.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Command::Run { scenario, out, seed, workers } => {
            let mut sc = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            let dir = out.or_else(|| sc.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let table = match run::execute(&sc, workers as usize) {
                Ok(t) => t,
                Err(e) => return fail("runtime", e, &[]),
            };
            for f in &table.failures {
                eprintln!("{}", json!({"warning": "row_failed", "row": f.row, "message": f.error}));
            }
            match run::write_outputs(&dir, &sc, &table) {
                Ok((csv, meta)) => {
                    println!("{}", json!({"csv": csv, "metadata": meta, "rows": table.rows.len(), "failed_rows": table.failures.len()}));
                    ExitCode::SUCCESS
                }
                Err(e) => fail("io", e, &[]),
            }
        }
    }
}
