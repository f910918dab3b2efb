//! `gmsfem-uq` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiments;
use crate::harness::output::RunRecorder;

#[derive(Debug, Parser)]
#[command(name = "gmsfem-uq", version, about = "GMsFEM forward models, multilevel Monte Carlo and multilevel MCMC")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every experiment seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sample-parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Truncated KLE: eigenvalues, energy ratio, modes.
    Kle,
    /// Build snapshot and offline spaces and write the cache.
    Offline,
    /// Fine and multiscale solves for one parameter.
    Forward,
    /// One MLMC vs cost-matched MC comparison.
    Mlmc,
    /// Plain Monte Carlo at the finest level.
    Mc,
    /// Multilevel screened MCMC on synthetic point data.
    Mlmcmc,
    /// MLMC vs MC over seed replicates.
    Table1 {
        /// Replicate count; defaults to `mlmc.replicates`.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Sampler checks against an enumerable posterior.
    ToyOracle,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Kle => "kle",
            Command::Offline => "offline",
            Command::Forward => "forward",
            Command::Mlmc => "mlmc",
            Command::Mc => "mc",
            Command::Mlmcmc => "mlmcmc",
            Command::Table1 { .. } => "table1",
            Command::ToyOracle => "toy-oracle",
        }
    }
}

/// Parses `args` (program name first), runs the stage and returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    if cli.workers == 0 {
        return Err(crate::Error::Config("--workers must be >= 1".into()));
    }
    let mut rec = RunRecorder::new(&cfg.output.dir, cli.command.name(), cfg.config_hash())?;
    let config_copy = rec.path("config.toml");
    std::fs::write(&config_copy, cfg.to_toml()).map_err(|e| crate::Error::io(&config_copy, e))?;
    rec.file(&config_copy)?;
    let w = cli.workers;
    match cli.command {
        Command::Kle => experiments::cmd_kle(&cfg, &mut rec)?,
        Command::Offline => experiments::cmd_offline(&cfg, w, &mut rec)?,
        Command::Forward => experiments::cmd_forward(&cfg, w, &mut rec)?,
        Command::Mlmc => {
            experiments::cmd_table1(&cfg, 1, w, &mut rec)?;
        }
        Command::Mc => experiments::cmd_mc(&cfg, w, &mut rec)?,
        Command::Mlmcmc => {
            experiments::cmd_mlmcmc(&cfg, w, &mut rec)?;
        }
        Command::Table1 { replicates } => {
            experiments::cmd_table1(&cfg, replicates.unwrap_or(cfg.mlmc.replicates), w, &mut rec)?;
        }
        Command::ToyOracle => {
            experiments::cmd_toy_oracle(cfg.seeds.chain, &mut rec)?;
        }
    }
    rec.finish()?;
    Ok(())
}
