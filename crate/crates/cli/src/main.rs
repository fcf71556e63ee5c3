use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctss::commands::{cmd_generate, cmd_report, cmd_run, load_experiment_config, ExperimentConfig};
use ctss::{Error, Method};

#[derive(Parser)]
#[command(name = "ctss", version, about = "Cross-subject co-teaching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort to a raw file.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run leave-one-subject-out training and evaluation.
    Run {
        /// TOML config, or a previous run's manifest.json to replay it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallel_folds: Option<usize>,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Print per-subject accuracy and selection-frequency tables.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Also write the accuracy table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: Option<PathBuf>) -> ctss::Result<ExperimentConfig> {
    match config {
        Some(path) => load_experiment_config(&path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(cli: Cli) -> ctss::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = load(config)?;
            if let Some(seed) = seed {
                cfg.generator.seed = seed;
            }
            cmd_generate(&cfg, &out)?;
        }
        Command::Run {
            config,
            out,
            seed,
            parallel_folds,
            method,
        } => {
            let mut cfg = load(config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            if let Some(k) = parallel_folds {
                cfg.parallel_folds = k;
            }
            if let Some(m) = method {
                cfg.method = m;
            }
            let summary = cmd_run(&cfg)?;
            println!(
                "{}: mean balanced accuracy {:.2}% (std {:.2}) -> {}",
                summary.method,
                100.0 * summary.mean,
                100.0 * summary.std,
                cfg.output_dir.display()
            );
        }
        Command::Report { run_dirs, out } => {
            let report = cmd_report(&run_dirs)?;
            print!("{}", report.text);
            if let Some(out) = out {
                std::fs::write(out, report.csv)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Validation(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Io(_) | Error::Format(_) | Error::Csv(_) | Error::Json(_) => 4,
        Error::Shape(_) | Error::State(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTSS_LOG_LEVEL", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
