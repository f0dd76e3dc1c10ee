//! `neld`: batch front end for the heat-bath, jump-process, SDE and shear MD
//! simulators. Results are written as CSV files under `--out`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::config::ConfigFile;

#[derive(Debug, Parser)]
#[command(name = "neld", version, about = "Seeded runs of the nonequilibrium Langevin simulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file with one table per subcommand; missing keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed. Overrides `seed` in the config file (default 0).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Run on a single worker thread. Output bytes do not depend on the
    /// thread count either way; this only pins the schedule.
    #[arg(long, global = true, value_name = "BOOL", default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,

    /// Independent replicas, each on its own random stream.
    #[arg(long, global = true, value_name = "N", default_value_t = 1,
          value_parser = clap::value_parser!(u64).range(1..))]
    replicas: u64,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Print friction, noise, FDR residual and the laminar-limit matrices.
    Coeffs,
    /// Integrate the limiting SDE.
    SdeRun,
    /// Event-driven heavy particle in a Poisson bath of light atoms.
    BathRun,
    /// Markov jump approximation of the bath.
    MarkovRun,
    /// Sheared Lennard-Jones liquid with a Langevin thermostat.
    MdRun,
    /// Markov and mechanical ensembles against the SDE moments over a mass grid.
    Converge,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const CONFIG: u8 = 2;
    pub const BLOWUP: u8 = 3;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl From<neld::Error> for Failure {
    fn from(e: neld::Error) -> Self {
        let code = match e {
            neld::Error::InvalidParameter(_) | neld::Error::UnsupportedLaw(_) => Self::CONFIG,
            neld::Error::Blowup(_) => Self::BLOWUP,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::from(e).context(format!("creating {}", cli.out.display())))?;
    let threads = if cli.deterministic { 1 } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure { code: 1, message: e.to_string() })?;
    let ctx = commands::Context { seed, out: cli.out, replicas: cli.replicas };
    log::debug!("{:?} with seed {seed}", cli.command);
    pool.install(|| match cli.command {
        Command::Coeffs => commands::coeffs(&file.coeffs),
        Command::SdeRun => commands::sde_run(&ctx, &file.sde),
        Command::BathRun => commands::bath_run(&ctx, &file.bath),
        Command::MarkovRun => commands::markov_run(&ctx, &file.markov),
        Command::MdRun => commands::md_run(&ctx, &file.md),
        Command::Converge => commands::converge(&ctx, &file.converge),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
