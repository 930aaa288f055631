use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loca::experiment::{
    calibrate_files, format_stats, run_demo, run_sweep, stats_files, ExperimentConfig,
    WorkflowError,
};

/// Logit calibration for knowledge distillation.
#[derive(Parser)]
#[command(name = "loca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mis-instruction statistics of a teacher logit dump.
    Stats {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Soften a logit dump at --tau and calibrate mis-instructed rows.
    Calibrate {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a teacher and compare the none/skip/loca policies over seeds.
    Demo {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Report file; the report is always printed as well.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Student accuracy under LoCa for each alpha in a list.
    SweepAlpha {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(
    path: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
) -> Result<ExperimentConfig, WorkflowError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write_report(path: Option<PathBuf>, text: &str) -> Result<(), WorkflowError> {
    if let Some(p) = path {
        std::fs::write(&p, text)
            .map_err(|e| WorkflowError::Usage(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), WorkflowError> {
    match cli.command {
        Command::Stats { logits, labels } => {
            let stats = stats_files(&logits, &labels)?;
            println!("{}", format_stats(&stats));
        }
        Command::Calibrate {
            logits,
            labels,
            alpha,
            tau,
            output,
        } => {
            let summary = calibrate_files(&logits, &labels, alpha, tau, &output)?;
            println!("calibrated={} total={}", summary.calibrated, summary.total);
        }
        Command::Demo {
            config,
            seeds,
            output,
        } => {
            let cfg = load_config(config, seeds)?;
            let outcome = run_demo(&cfg)?;
            print!("{}", outcome.text);
            write_report(output, &outcome.text)?;
        }
        Command::SweepAlpha {
            config,
            alpha,
            seeds,
            output,
        } => {
            let cfg = load_config(config, seeds)?;
            if alpha.is_empty() {
                return Err(WorkflowError::Usage("--alpha list is empty".into()));
            }
            let outcome = run_sweep(&cfg, &alpha)?;
            for line in outcome.notices.iter().chain(&outcome.warnings) {
                eprintln!("{line}");
            }
            print!("{}", outcome.text);
            write_report(output, &outcome.text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
