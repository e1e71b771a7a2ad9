use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;
use mswl_core::runner::{self, ExperimentConfig, Mode};
use mswl_core::{generate_cohort, write_cohort};

#[derive(Parser)]
#[command(name = "mswl", version, about = "Multi-site weighted LASSO feature selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config. Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every site and the server in one process.
    Simulate(Common),
    /// Run the integration server and wait for sites over TCP.
    Server(Common),
    /// Run one site against a server.
    Site {
        #[command(flatten)]
        common: Common,
        /// Site CSV file; its file stem is the site id.
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic cohort as one CSV per site.
    Synth(Common),
    /// Simulate once per sparsity level.
    Sweep(Common),
}

fn load(common: &Common, mode: Mode) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    config.mode = mode;
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_summary(dir: &Path) -> Result<()> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let config = load(&common, Mode::Simulate)?;
            runner::run_experiment(&config)?;
            print_summary(&config.out_dir)?;
        }
        Command::Server(common) => {
            let config = load(&common, Mode::Server)?;
            runner::run_server(&config)?;
            print_summary(&config.out_dir)?;
        }
        Command::Site { common, data } => {
            let config = load(&common, Mode::Site)?;
            let state = runner::run_site(&config, &data)?;
            let summary = serde_json::json!({
                "site_id": state.site_id(),
                "selected": state.current_features().indices(),
                "accuracy": state.current_metrics().accuracy,
                "specificity": state.current_metrics().specificity,
                "sensitivity": state.current_metrics().sensitivity,
            });
            println!("{summary}");
        }
        Command::Synth(common) => {
            let config = load(&common, Mode::Simulate)?;
            let cohort = generate_cohort(&config.cohort)?;
            for path in write_cohort(&cohort.tables, &config.out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Sweep(common) => {
            let config = load(&common, Mode::Simulate)?;
            runner::run_sweep(&config)?;
            let path = config.out_dir.join("sweep").join("summary.csv");
            print!("{}", std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSWL_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
