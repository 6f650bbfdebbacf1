//! `v2g`: scenario simulation, fleet generation, and ledger validation
//! from the command line. Runs are fully reproducible from the config
//! and seed; the only tunable is `V2G_SIM_THREADS`, which caps the
//! price-search worker pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use v2g_core::fleet::{generate_fleet, serialize_fleet_csv, FleetGenConfig};
use v2g_core::ledger::{export_chain, import_chain, verify_chain};
use v2g_core::simulator::{
    baseline_uncoordinated, compare_reports, report_to_csv, run_horizon, ScenarioConfig, SimError,
};

#[derive(Parser)]
#[command(name = "v2g", about = "Blockchain-coordinated V2G trading simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write reports and the exported ledger.
    Simulate {
        /// Scenario configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Also run the plug-and-charge baseline and write a comparison.
        #[arg(long)]
        baseline: bool,
    },
    /// Generate a synthetic fleet CSV.
    GenFleet {
        /// Number of EVs, >= 1.
        #[arg(long)]
        n: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Disable jitter (tile the seed rows verbatim when n matches).
        #[arg(long)]
        no_jitter: bool,
    },
    /// Validate an exported ledger file.
    ValidateLedger {
        /// Ledger file written by `simulate` (hex, one block per line).
        #[arg(long)]
        ledger: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(threads) = read_thread_cap() {
        // Ignore the error if a pool already exists (tests call main
        // logic repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match cli.command {
        Command::Simulate {
            config,
            out,
            baseline,
        } => cmd_simulate(&config, &out, baseline),
        Command::GenFleet {
            n,
            seed,
            out,
            no_jitter,
        } => cmd_gen_fleet(n, seed, &out, no_jitter),
        Command::ValidateLedger { ledger } => cmd_validate_ledger(&ledger),
    }
}

fn read_thread_cap() -> Option<usize> {
    let raw = std::env::var("V2G_SIM_THREADS").ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Some(n),
        _ => {
            eprintln!("ignoring V2G_SIM_THREADS={raw:?}: expected a positive integer");
            None
        }
    }
}

fn cmd_simulate(config_path: &Path, out_dir: &Path, with_baseline: bool) -> ExitCode {
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read config {}: {e}", config_path.display());
            return ExitCode::from(1);
        }
    };
    let config = match ScenarioConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("bad config {}: {e}", config_path.display());
            return ExitCode::from(1);
        }
    };
    // Relative input paths in the config resolve against its directory.
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        eprintln!("cannot create output dir {}: {e}", out_dir.display());
        return ExitCode::from(1);
    }

    let run = match run_horizon(&config, &base) {
        Ok(r) => r,
        Err(e) => return simulate_failure(e),
    };
    let summary = serde_json::json!({
        "config_digest": run.report.config_digest,
        "summary": run.report.summary,
        "per_ev": run.report.per_ev,
    });
    let mut writes = vec![
        ("report.csv", report_to_csv(&run.report)),
        ("summary.json", pretty(&summary)),
        ("ledger.hex", export_chain(&run.chain)),
    ];

    if with_baseline {
        let base_report = match baseline_uncoordinated(&config, &base) {
            Ok(r) => r,
            Err(e) => return simulate_failure(e),
        };
        let comparison = match compare_reports(&run.report, &base_report) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("comparison failed: {e}");
                return ExitCode::from(2);
            }
        };
        writes.push(("baseline.csv", report_to_csv(&base_report)));
        writes.push(("comparison.json", pretty(&comparison)));
    }

    for (name, content) in writes {
        let path = out_dir.join(name);
        if let Err(e) = std::fs::write(&path, content) {
            eprintln!("cannot write {}: {e}", path.display());
            return ExitCode::from(2);
        }
        println!("wrote {}", path.display());
    }
    ExitCode::SUCCESS
}

/// Config problems exit 1; runtime problems exit 2 with the slot named
/// by the error chain.
fn simulate_failure(e: SimError) -> ExitCode {
    eprintln!("simulation failed: {e}");
    match e {
        SimError::Config(_) | SimError::Fleet(_) | SimError::Io(_) | SimError::ConfigMismatch => {
            ExitCode::from(1)
        }
        SimError::Slot { .. } | SimError::Protocol(_) => ExitCode::from(2),
    }
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("serializable");
    out.push('\n');
    out
}

fn cmd_gen_fleet(n: usize, seed: u64, out: &Path, no_jitter: bool) -> ExitCode {
    if n == 0 {
        eprintln!("--n must be at least 1");
        return ExitCode::from(1);
    }
    let gen = if no_jitter {
        FleetGenConfig::no_jitter()
    } else {
        FleetGenConfig::default()
    };
    let records = match generate_fleet(n, seed, &gen) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("fleet generation failed: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = std::fs::write(out, serialize_fleet_csv(&records)) {
        eprintln!("cannot write {}: {e}", out.display());
        return ExitCode::from(1);
    }
    println!("wrote {} ({} EVs)", out.display(), records.len());
    ExitCode::SUCCESS
}

fn cmd_validate_ledger(ledger: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(ledger) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read ledger {}: {e}", ledger.display());
            return ExitCode::from(1);
        }
    };
    let chain = match import_chain(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ledger parse failed: {e}");
            return ExitCode::from(1);
        }
    };
    match verify_chain(&chain) {
        Ok(()) => {
            println!(
                "ledger valid: {} blocks, tip slot {}",
                chain.blocks.len(),
                chain.tip().header.slot
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ledger invalid: {e}");
            ExitCode::from(3)
        }
    }
}
