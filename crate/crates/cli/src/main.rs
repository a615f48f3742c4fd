//! `wcq` — train small quantized CNNs and analyze their worst-case accuracy
//! under bounded weight perturbation.

mod config;
mod dataset;
mod error;
mod fetch;
mod pipeline;
mod report;

// The training and search loops allocate fresh activation buffers every step;
// the system allocator spends a double-digit share of wall time in page
// management for that pattern, mimalloc does not.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use clap::{Args, Parser, Subcommand};
use config::{Config, Overrides};
use error::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "wcq",
    version,
    about = "Worst-case accuracy of quantized CNNs under bounded weight perturbation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every experiment stage.
#[derive(Args, Debug)]
struct CommonArgs {
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the derived perturbation bound th_g (adjusts the cell
    /// threshold through the configured device geometry).
    #[arg(long)]
    thg: Option<f64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<String>,
    /// Override the trained checkpoint consumed by analysis stages.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            th_g: self.thg,
            out_dir: self.out.clone(),
            checkpoint: self.model.as_ref().map(|p| p.display().to_string()),
        })?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a quantized network and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Start from an existing checkpoint instead of fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train under bounded uniform weight noise (noise bound = device th_g).
    VaTrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Start from an existing checkpoint instead of fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train against a truncated worst-case search on every batch.
    AdvTrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Start from an existing checkpoint instead of fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Find a worst-case bounded perturbation of a trained checkpoint.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte-Carlo baseline: sample random perturbations, keep the worst.
    Mc {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Projected-gradient baseline on the weights.
    Pgd {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Worst-case accuracy across a grid of write-verify bounds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-derive and verify every number in an existing run directory.
    Analyze {
        /// Run directory holding resolved_config.json, report.json and
        /// perturbation.bin.
        #[arg(long)]
        run: PathBuf,
    },
    /// Download and checksum-verify the configured dataset.
    Fetch {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common, init } => {
            pipeline::run_train(&common.resolve()?, init.as_deref())
        }
        Command::VaTrain { common, init } => {
            pipeline::run_va_train(&common.resolve()?, init.as_deref())
        }
        Command::AdvTrain { common, init } => {
            pipeline::run_adv_train(&common.resolve()?, init.as_deref())
        }
        Command::Attack { common } => pipeline::run_attack(&common.resolve()?),
        Command::Mc { common } => pipeline::run_mc(&common.resolve()?),
        Command::Pgd { common } => pipeline::run_pgd(&common.resolve()?),
        Command::Sweep { common } => pipeline::run_sweep(&common.resolve()?),
        Command::Analyze { run } => pipeline::run_analyze(&run),
        Command::Fetch { common } => {
            let cfg = common.resolve()?;
            fetch::run_fetch(&cfg.data.dataset, &cfg.data.dir)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
