//! `impabs`: finite abstractions of impulsive networks, from system files to
//! verified relations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use commands::{Ctx, Outcome};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "impabs", version, about = "Compositional finite abstractions of impulsive system networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for tables and reports.
    #[arg(long, global = true, env = "IMPABS_OUT_DIR", default_value = "impabs-out")]
    out: PathBuf,
    /// Seed for all sampling; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write transition tables in the binary format.
    #[arg(long, global = true)]
    binary: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse and check the system, certificate and quantization.
    Validate,
    /// Build one transition table per subsystem.
    Abstract,
    /// Check certificates, dwell time, compositionality and input inclusion.
    Certify,
    /// Explore the composed abstraction.
    Compose,
    /// Check the simulation-function conditions and fit their constants.
    Verify,
    /// Random paired runs against the deviation bound.
    Simulate,
    /// Safety controller on the composed abstraction.
    Synthesize,
}

fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| anyhow!("cannot size the worker pool: {e}"))?;
    }
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config <path> is required"))?;
    let (cfg, base) = RunConfig::load(path)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let ctx = Ctx {
        cfg,
        base,
        out: cli.out.clone(),
        seed,
        binary: cli.binary,
    };
    match cli.command {
        Command::Validate => commands::validate(&ctx),
        Command::Abstract => commands::abstract_(&ctx),
        Command::Certify => commands::certify(&ctx),
        Command::Compose => commands::compose(&ctx),
        Command::Verify => commands::verify(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Synthesize => commands::synthesize(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
