//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_loop::{trajectory_cost, write_trajectory_csv};
use crate::config::{builtin, sweep_configs, ExampleConfig, BUILTIN_NAMES};
use crate::gbf::{check_reach, verify_certificate, ReachCheck, ViolationReport, VERIFY_TOLERANCE};
use crate::rampc::{initial_trajectory, run, CertificateFile, RunOptions, RunOutcome, Termination};

/// Exit code for a run, rollout or check that completed but failed.
pub const EXIT_FAILED: i32 = 1;
/// Exit code for malformed command lines.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for unreadable or invalid input files.
pub const EXIT_INPUT: i32 = 3;
/// Exit code for output that could not be written.
pub const EXIT_IO: i32 = 4;

/// Name accepted by `example` for the horizon sweep.
pub const SWEEP_NAME: &str = "sweep";

#[derive(Debug, Parser)]
#[command(name = "rampc", about = "Reach-avoid MPC with guidance-barrier certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the learning loop on a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Also write per-step MPC records.
        #[arg(long)]
        step_log: bool,
    },
    /// Run a built-in example, or `sweep` for the horizon study.
    Example {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        step_log: bool,
    },
    /// Check a stored certificate by sampling and closed-loop rollouts.
    VerifyCert {
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Samples per region.
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Roll out the initial policy and report its cost.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        controller: RolloutController,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RolloutController {
    Init,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    category: &'static str,
    message: String,
}

fn fail(code: i32, category: &'static str, message: impl ToString) -> Failure {
    Failure {
        code,
        category,
        message: message.to_string(),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error[{}]: {}", f.category, f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            out,
            seed,
            max_iters,
            step_log,
        } => {
            let cfg = load_config(&config)?;
            run_one(cfg, &out, seed, max_iters, step_log)
        }
        Command::Example {
            name,
            out,
            seed,
            max_iters,
            step_log,
        } => {
            if name == SWEEP_NAME {
                return sweep(&out, seed, max_iters);
            }
            let cfg = builtin(&name).map_err(|e| {
                fail(
                    EXIT_USAGE,
                    "usage",
                    format!("{e}; known: {}, {SWEEP_NAME}", BUILTIN_NAMES.join(", ")),
                )
            })?;
            run_one(cfg, &out, seed, max_iters, step_log)
        }
        Command::VerifyCert {
            cert,
            config,
            samples,
            rollouts,
            seed,
        } => verify(&cert, &config, samples, rollouts, seed),
        Command::Rollout {
            config,
            controller: RolloutController::Init,
            out,
        } => rollout(&config, out.as_deref()),
    }
}

fn load_config(path: &Path) -> Result<ExampleConfig, Failure> {
    ExampleConfig::load(path).map_err(|e| fail(EXIT_INPUT, "config", format!("{}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut ExampleConfig, seed: Option<u64>, max_iters: Option<usize>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = max_iters {
        cfg.max_iters = k;
    }
}

fn execute(cfg: &ExampleConfig, out: &Path, step_log: bool) -> Result<RunOutcome, Failure> {
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        step_log,
        ..RunOptions::default()
    };
    run(cfg, &opts).map_err(|e| match e {
        crate::rampc::RampcError::Io(_) => fail(EXIT_IO, "io", e),
        crate::rampc::RampcError::Config(_) => fail(EXIT_INPUT, "config", e),
        _ => fail(EXIT_FAILED, "run", e),
    })
}

fn run_one(
    mut cfg: ExampleConfig,
    out: &Path,
    seed: Option<u64>,
    max_iters: Option<usize>,
    step_log: bool,
) -> Result<(), Failure> {
    apply_overrides(&mut cfg, seed, max_iters);
    let outcome = execute(&cfg, out, step_log)?;
    for r in &outcome.reports {
        println!("j={} cost={:.4} L={}", r.j, r.cost, r.episode_len);
    }
    println!("termination: {:?}", outcome.termination);
    match &outcome.failure {
        Some(f) => Err(fail(
            EXIT_FAILED,
            "run",
            format!("iteration {} failed in {}: {}", f.j, f.phase, f.message),
        )),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct SweepRow {
    horizon: usize,
    iterations: usize,
    final_cost: f64,
    termination: Termination,
}

/// Runs every horizon of the sweep concurrently into `out/N{n}` and writes
/// `out/sweep.csv` with one row per horizon.
fn sweep(out: &Path, seed: Option<u64>, max_iters: Option<usize>) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| fail(EXIT_IO, "io", e))?;
    let results: Vec<Result<SweepRow, Failure>> = sweep_configs()
        .into_par_iter()
        .map(|mut cfg| {
            apply_overrides(&mut cfg, seed, max_iters);
            let outcome = execute(&cfg, &out.join(format!("N{}", cfg.horizon)), false)?;
            Ok(SweepRow {
                horizon: cfg.horizon,
                iterations: outcome.reports.len() - 1,
                final_cost: outcome.final_cost(),
                termination: outcome.termination,
            })
        })
        .collect();
    let rows: Vec<SweepRow> = results.into_iter().collect::<Result<_, _>>()?;
    for r in &rows {
        println!(
            "N={} iterations={} cost={:.4} termination={:?}",
            r.horizon, r.iterations, r.final_cost, r.termination
        );
    }
    let csv = sweep_csv(&rows);
    fs::write(out.join("sweep.csv"), csv).map_err(|e| fail(EXIT_IO, "io", e))?;
    if rows.iter().any(|r| r.termination == Termination::Failed) {
        return Err(fail(EXIT_FAILED, "run", "at least one horizon failed"));
    }
    Ok(())
}

/// Header of `sweep.csv`.
pub const SWEEP_HEADER: &str = "N,iterations,final_cost,termination";

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let term = serde_json::to_value(r.termination).expect("enum serializes");
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.horizon,
            r.iterations,
            r.final_cost,
            term.as_str().unwrap_or("")
        ));
    }
    csv
}

#[derive(Serialize)]
struct VerifyOutput {
    passed: bool,
    report: ViolationReport,
    reach: ReachCheck,
    lambda_matches: bool,
    bound_matches: bool,
}

fn verify(cert: &Path, config: &Path, samples: usize, rollouts: usize, seed: u64) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let text =
        fs::read_to_string(cert).map_err(|e| fail(EXIT_INPUT, "certificate", format!("{}: {e}", cert.display())))?;
    let file = CertificateFile::from_json(&text)
        .map_err(|e| fail(EXIT_INPUT, "certificate", format!("{}: {e}", cert.display())))?;
    let sets = cfg.sets().map_err(|e| fail(EXIT_INPUT, "config", e))?;
    let sys = cfg.system();
    if file.certificate.v.nvars() != cfg.state_dim || file.controller.state_dim() != cfg.state_dim {
        return Err(fail(
            EXIT_INPUT,
            "certificate",
            "dimension does not match the configuration",
        ));
    }
    let set = file.reach_avoid(&sets.safe);
    let report = verify_certificate(&set, &sys, &file.controller, &sets, &cfg.x0, samples, seed);
    let reach = check_reach(&set, &sys, &file.controller, &sets, rollouts, seed.wrapping_add(1));
    let lambda_matches = file.certificate.lambda == cfg.lambda;
    let bound_matches = file.certificate.bound == cfg.bound;
    let passed = report.passes(VERIFY_TOLERANCE)
        && (rollouts == 0 || reach.all_good())
        && lambda_matches
        && bound_matches
        && report.samples.iter().all(|&c| c == samples);
    let summary = VerifyOutput {
        passed,
        report,
        reach,
        lambda_matches,
        bound_matches,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    if passed {
        Ok(())
    } else {
        Err(fail(EXIT_FAILED, "verify", "certificate check failed"))
    }
}

fn rollout(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let traj = initial_trajectory(&cfg).map_err(|e| fail(EXIT_FAILED, "rollout", e))?;
    println!("cost={:.4} L={}", trajectory_cost(&traj), traj.len());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| fail(EXIT_IO, "io", e))?;
        let mut f = fs::File::create(dir.join("trajectory_0.csv")).map_err(|e| fail(EXIT_IO, "io", e))?;
        write_trajectory_csv(&mut f, 0, &traj).map_err(|e| fail(EXIT_IO, "io", e))?;
        f.flush().map_err(|e| fail(EXIT_IO, "io", e))?;
    }
    Ok(())
}
