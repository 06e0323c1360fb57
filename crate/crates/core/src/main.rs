use std::fs;
use std::num::NonZeroU64;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use carelabel::codec;
use carelabel::harness::fuzz::fuzz;
use carelabel::harness::replay::replay;
use carelabel::harness::runner::{run_scenario, RunOptions};
use carelabel::harness::script::render_script;
use carelabel::harness::{check_invariants, snapshot};
use carelabel::SystemState;

const PASS: u8 = 0;
const FAIL: u8 = 1;
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "carelabel",
    version,
    about = "Labelled healthcare data store simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Outputs {
    /// Write the final state snapshot here.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Write the audit log dump here.
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script.
    Run {
        script: PathBuf,
        /// Compare against the reference model after every command.
        #[arg(long)]
        diff: bool,
        /// Require deleted items to be present at every reader hospital.
        #[arg(long)]
        strict_delete: bool,
        /// Sweep whenever the clock crosses a multiple of N ticks.
        #[arg(long, value_name = "N")]
        sweep_every: Option<NonZeroU64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check invariants when the script ends (default).
        #[arg(long, overrides_with = "no_check")]
        check: bool,
        #[arg(long)]
        no_check: bool,
        /// Also check invariants after every command.
        #[arg(long)]
        check_each: bool,
        #[command(flatten)]
        out: Outputs,
    },
    /// Run a seeded random trace with the reference model and invariant
    /// checks after every command.
    Fuzz {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_name = "N", default_value = "10")]
        sweep_every: NonZeroU64,
        #[arg(long)]
        strict_delete: bool,
        /// Write the executed trace as a replayable script.
        #[arg(long)]
        emit: Option<PathBuf>,
        #[command(flatten)]
        out: Outputs,
    },
    /// Evaluate the invariant suite on a snapshot.
    Check { snapshot: PathBuf },
    /// Rebuild a state from an audit dump.
    Replay {
        audit: PathBuf,
        /// Compare the rebuilt state with this snapshot (outbox excluded).
        #[arg(long)]
        against: Option<PathBuf>,
        /// Write the rebuilt snapshot here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, u8> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        USAGE
    })
}

fn write(path: &Path, text: &str) -> Result<(), u8> {
    fs::write(path, text).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        USAGE
    })
}

fn write_outputs(out: &Outputs, state: &SystemState) -> Result<(), u8> {
    if let Some(p) = &out.snapshot {
        write(p, &snapshot::render(state, true))?;
    }
    if let Some(p) = &out.audit {
        write(p, &codec::dump_audit(state.audit.records()))?;
    }
    Ok(())
}

fn load_snapshot(path: &Path) -> Result<SystemState, u8> {
    snapshot::parse(&read(path)?).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        USAGE
    })
}

fn execute(cli: Cli) -> Result<u8, u8> {
    match cli.command {
        Cmd::Run {
            script,
            diff,
            strict_delete,
            sweep_every,
            seed,
            check: _,
            no_check,
            check_each,
            out,
        } => {
            let opts = RunOptions {
                diff,
                strict_delete,
                sweep_every,
                seed,
                check_each,
                check_on_exit: !no_check,
            };
            let report = run_scenario(&read(&script)?, &opts).map_err(|e| {
                eprintln!("error: {}: {e}", script.display());
                USAGE
            })?;
            print!("{}", report.trace);
            write_outputs(&out, &report.state)?;
            if let Some(f) = &report.failure {
                eprintln!("error: {f}");
            }
            Ok(report.exit_code() as u8)
        }
        Cmd::Fuzz {
            seed,
            steps,
            sweep_every,
            strict_delete,
            emit,
            out,
        } => {
            let opts = RunOptions {
                diff: true,
                strict_delete,
                sweep_every: Some(sweep_every),
                seed,
                check_each: true,
                check_on_exit: true,
            };
            let report = fuzz(seed, steps, &opts);
            if let Some(p) = &emit {
                write(p, &render_script(&report.script))?;
            }
            write_outputs(&out, &report.state)?;
            match &report.failure {
                Some(f) => {
                    eprintln!("error: seed {seed}: {f}");
                    Ok(FAIL)
                }
                None => {
                    println!(
                        "seed {seed}: {} commands, {} refused, {} audit records, 0 violations, 0 divergences",
                        report.generated,
                        report.refused,
                        report.state.audit.len()
                    );
                    Ok(PASS)
                }
            }
        }
        Cmd::Check { snapshot } => {
            let state = load_snapshot(&snapshot)?;
            let report = check_invariants(&state);
            print!("{report}");
            Ok(if report.all_pass() { PASS } else { FAIL })
        }
        Cmd::Replay {
            audit,
            against,
            out,
        } => {
            let records = codec::parse_audit_dump(&read(&audit)?).map_err(|(line, e)| {
                eprintln!("error: {} line {line}: {e}", audit.display());
                USAGE
            })?;
            let replayer = match replay(&records) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(FAIL);
                }
            };
            let mut code = PASS;
            for v in replayer.violations() {
                eprintln!("error: {v}");
                code = FAIL;
            }
            let rebuilt = snapshot::render(replayer.state(), false);
            match &out {
                Some(p) => write(p, &rebuilt)?,
                None if against.is_none() => print!("{rebuilt}"),
                None => {}
            }
            if let Some(p) = &against {
                let expected = snapshot::render(&load_snapshot(p)?, false);
                if expected == rebuilt {
                    println!("replay matches {}", p.display());
                } else {
                    eprintln!("error: replay differs from {}", p.display());
                    code = FAIL;
                }
            }
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) | Err(code) => ExitCode::from(code),
    }
}
