//! Command-line front end: `check`, `steer`, `mc` and `fbm` subcommands over
//! a sectioned key-value config.

use std::path::PathBuf;
use std::process::ExitCode;

use fracsteer::cli::{self, CliError, ExperimentConfig};

const USAGE: &str = "\
fracsteer — simulation and steering control for fractionally driven
impulsive neutral heat equations

USAGE:
  fracsteer <SUBCOMMAND> --config PATH [FLAGS]
  fracsteer --schema

SUBCOMMANDS:
  check   evaluate the hypothesis constants and verdicts
  steer   one steering run (trajectory.csv, control.csv, summary.json)
  mc      Monte-Carlo batch of steering runs (paths.csv, mc_summary.json)
  fbm     noise-only sampling (fbm_paths.csv)

FLAGS:
  --config PATH   experiment config (required unless --schema)
  --seed N        override the master seed
  --out DIR       override the [output] dir
  --jobs N        override the [mc] jobs limit
  --schema        print file schemas and exit codes, then exit
  --help          this text

EXIT CODES:
  0 success (all verdicts true)   1 config error
  2 a check verdict is false      3 steering did not converge
";

struct Args {
    subcommand: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
}

fn parse_args() -> Result<Option<Args>, String> {
    let mut argv = std::env::args().skip(1).peekable();
    let mut subcommand = None;
    let mut config = None;
    let mut seed = None;
    let mut out = None;
    let mut jobs = None;
    while let Some(arg) = argv.next() {
        match arg.as_str() {
            "--help" | "-h" => {
                println!("{USAGE}");
                return Ok(None);
            }
            "--schema" => {
                print!("{}", cli::schema_text());
                return Ok(None);
            }
            "--config" => {
                let v = argv.next().ok_or("missing value for --config")?;
                config = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = argv.next().ok_or("missing value for --seed")?;
                seed = Some(v.parse().map_err(|_| format!("bad seed `{v}`"))?);
            }
            "--out" => {
                let v = argv.next().ok_or("missing value for --out")?;
                out = Some(PathBuf::from(v));
            }
            "--jobs" => {
                let v = argv.next().ok_or("missing value for --jobs")?;
                jobs = Some(v.parse().map_err(|_| format!("bad job count `{v}`"))?);
            }
            other if !other.starts_with('-') && subcommand.is_none() => {
                subcommand = Some(other.to_string());
            }
            other => return Err(format!("unexpected argument `{other}`")),
        }
    }
    let subcommand = subcommand.ok_or("missing subcommand (check | steer | mc | fbm)")?;
    Ok(Some(Args {
        subcommand,
        config,
        seed,
        out,
        jobs,
    }))
}

fn load(args: &Args) -> Result<ExperimentConfig, CliError> {
    let path = args.config.as_ref().ok_or_else(|| {
        CliError::ConfigGeneral("--config PATH is required for this subcommand".into())
    })?;
    let mut config = cli::load_config(path)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(jobs) = args.jobs {
        config.jobs = jobs.max(1);
    }
    Ok(config)
}

fn dispatch(args: &Args) -> Result<u8, CliError> {
    match args.subcommand.as_str() {
        "check" => {
            let config = load(args)?;
            let outcome = cli::run_check(&config)?;
            print!("{}", outcome.rendered);
            Ok(if outcome.all_ok { 0 } else { 2 })
        }
        "steer" => {
            let config = load(args)?;
            let record = cli::run_steer(&config, args.seed)?;
            println!(
                "steer: terminal_error_sq = {:.6e}, energy = {:.6e}, updates = {}, converged = {}",
                record.terminal_error_sq, record.energy, record.outer_iters, record.converged
            );
            Ok(if record.converged { 0 } else { 3 })
        }
        "mc" => {
            let config = load(args)?;
            let summary = cli::run_mc(&config)?;
            println!(
                "mc: {}/{} converged, mean terminal_error_sq = {:.6e}, mean energy = {:.6e}",
                summary.n_converged,
                summary.n_paths,
                summary.mean_terminal_error_sq,
                summary.mean_energy
            );
            Ok(if summary.failures.is_empty() { 0 } else { 3 })
        }
        "fbm" => {
            let config = load(args)?;
            let n = cli::run_fbm(&config)?;
            println!("fbm: wrote {n} paths to {}", config.out_dir.display());
            Ok(0)
        }
        other => Err(CliError::ConfigGeneral(format!(
            "unknown subcommand `{other}` (check | steer | mc | fbm)"
        ))),
    }
}

fn main() -> ExitCode {
    let args = match parse_args() {
        Ok(Some(args)) => args,
        Ok(None) => return ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&args) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
