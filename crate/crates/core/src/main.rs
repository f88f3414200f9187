use chaospump::cli::{dispatch, Command};
use chaospump::config::{parse_config, Config};
use chaospump::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Energy pumping experiments for a chaotic billiard-like oscillator.
#[derive(Parser, Debug)]
#[command(version, about, after_help = "Configuration keys may be overridden with environment variables named CHAOSPUMP_<SECTION>_<KEY>.")]
struct Args {
    /// Sectioned `key = value` configuration file; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for the manifold node sweep.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Debug logging to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Kernel P(s) against the Monte Carlo ball-overlap estimate.
    KernelCheck,
    /// Forcing amplitude against shell quadrature, and its first zero.
    Forcing,
    /// Table geometry.
    Table,
    /// Two-bounce orbits, their hyperbolicity and connections.
    Orbits,
    /// Energy conservation without forcing and the gradient check.
    Conserve,
    /// Smooth against billiard section returns at increasing energy.
    Limit,
    /// Energy-rate law residual across coupling strengths.
    Rate,
    /// History manifold: Picard iteration, invariance defect, divergence.
    Reduce,
    /// Cross-form fits and coded orbits for random words.
    CodeOrbit,
    /// Phase-controlled acceleration run with the drift bound check.
    Accelerate,
    /// Constant-code, zero-coupling and reversed control runs.
    Control,
    /// Energy trend without forcing (exploratory).
    Dissipate,
    /// Summary of the verdict files in the output directory.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::KernelCheck => Command::KernelCheck,
            Cmd::Forcing => Command::Forcing,
            Cmd::Table => Command::Table,
            Cmd::Orbits => Command::Orbits,
            Cmd::Conserve => Command::Conserve,
            Cmd::Limit => Command::Limit,
            Cmd::Rate => Command::Rate,
            Cmd::Reduce => Command::Reduce,
            Cmd::CodeOrbit => Command::CodeOrbit,
            Cmd::Accelerate => Command::Accelerate,
            Cmd::Control => Command::Control,
            Cmd::Dissipate => Command::Dissipate,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    let cfg = match &args.config {
        Some(path) => parse_config(path),
        None => Config::parse("", |k| std::env::var(k).ok()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    log::debug!("configuration:\n{}", cfg.render());
    let command = Command::from(args.command);
    match dispatch(command, &cfg, &args.out, args.threads) {
        Ok(outcome) => {
            for (k, v) in &outcome.verdict {
                println!("{k} = {v}");
            }
            println!("{} {}", command.name(), if outcome.passed { "PASS" } else { "FAIL" });
            ExitCode::from(if outcome.passed { 0 } else { 1 })
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}: {e}", command.name());
            ExitCode::from(3)
        }
    }
}
