//! Command-line front end for the case-study runner.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neural_filter::experiments::{
    compare_runs, filter_only, read_summary, run_case_study, train_only, ExperimentConfig,
    ExperimentError, RunOptions, RunSummary,
};

#[derive(Parser)]
#[command(
    name = "neural-filter",
    version,
    about = "Train neural surrogates of ODE dynamics and run measurement-corrected state estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Replace all four seeds with N, N+1, N+2, N+3 (data, init, train, noise).
    #[arg(long, value_name = "N")]
    seed_override: Option<u64>,
    /// Write artifacts into this directory instead of the resolved default.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Use the full paper-scale sample count where the config carries one.
    #[arg(long)]
    full_paper_scale: bool,
}

impl RunFlags {
    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir_override: self.out_dir.clone(),
            seed_override: self.seed_override,
            full_paper_scale: self.full_paper_scale,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a full case study: generate, train, simulate, estimate, emit.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Report error ratios between two summary files of the same case study.
    Compare {
        summary_a: PathBuf,
        summary_b: PathBuf,
    },
    /// Generate data and train only; persists the model and loss traces.
    TrainOnly {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run estimation with a previously trained model file.
    FilterOnly {
        config: PathBuf,
        model_file: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn print_summary(summary: &RunSummary) {
    println!("system: {} ({} steps)", summary.system, summary.horizon_steps);
    println!(
        "filter error (final-quarter mean):    {:.6e}",
        summary.filter_err_final_quarter_mean
    );
    println!(
        "open-loop error (final-quarter mean): {:.6e}",
        summary.open_loop_err_final_quarter_mean
    );
    println!("filter max tr P:                      {:.6e}", summary.filter_trace_p_max);
    println!(
        "open-loop final tr P:                 {:.6e}",
        summary.open_loop_trace_p_final
    );
    if let (Some(t), Some(v)) = (summary.final_train_loss, summary.final_val_loss) {
        println!("final train / val loss:               {t:.6e} / {v:.6e}");
    }
    if let Some(step) = summary.open_loop_divergence_step {
        println!("open-loop rollout diverged at step {step}");
    }
    println!("wall clock: {:.1}s", summary.wall_clock_seconds);
}

fn exit_code_for(err: &ExperimentError) -> u8 {
    match err {
        ExperimentError::Config(_)
        | ExperimentError::InvalidComparison(_)
        | ExperimentError::InvalidSummary { .. } => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, u8> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

fn dispatch(cli: Cli) -> Result<(), u8> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = load_config(&config)?;
            let summary = run_case_study(&cfg, &flags.options()).map_err(|e| {
                eprintln!("error: {e}");
                exit_code_for(&e)
            })?;
            print_summary(&summary);
            Ok(())
        }
        Command::Compare {
            summary_a,
            summary_b,
        } => {
            let report = read_summary(&summary_a)
                .and_then(|a| Ok((a, read_summary(&summary_b)?)))
                .and_then(|(a, b)| compare_runs(&a, &b))
                .map_err(|e| {
                    eprintln!("error: {e}");
                    exit_code_for(&e)
                })?;
            println!("{report}");
            Ok(())
        }
        Command::TrainOnly { config, flags } => {
            let cfg = load_config(&config)?;
            let (train_loss, val_loss) = train_only(&cfg, &flags.options()).map_err(|e| {
                eprintln!("error: {e}");
                exit_code_for(&e)
            })?;
            println!("final train / val loss: {train_loss:.6e} / {val_loss:.6e}");
            Ok(())
        }
        Command::FilterOnly {
            config,
            model_file,
            flags,
        } => {
            let cfg = load_config(&config)?;
            let summary = filter_only(&cfg, &model_file, &flags.options()).map_err(|e| {
                eprintln!("error: {e}");
                exit_code_for(&e)
            })?;
            print_summary(&summary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
