//! End-to-end case-study execution.
//!
//! One run goes: generate the one-step dataset, train the surrogate,
//! simulate the noisy ground truth, roll the surrogate out open loop, run
//! the corrected recursion, and emit artifacts into the run directory:
//!
//! - `model.bin` — trained network
//! - `loss.csv`, `loss_smoothed.csv` — training/validation losses
//! - `trajectory_filter.csv`, `trajectory_open_loop.csv` — per-step records
//! - `summary.txt` — headline metrics
//!
//! Every stage is seeded from the config, so a config maps to byte-identical
//! artifacts (the wall-clock line in the summary aside). A stage failure
//! leaves a `.failed` marker naming the stage next to any partial artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use super::emit;
use crate::dynamics::simulate_truth;
use crate::filter::{open_loop_rollout, run_filter, FilterRecord};
use crate::mlp::MlpModel;
use crate::training::{generate_dataset, mean_squared_error, split_dataset, train};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid record for emission: {0}")]
    InvalidRecord(String),
    #[error("invalid summary file {path}: {message}")]
    InvalidSummary { path: PathBuf, message: String },
    #[error("summaries are not comparable: {0}")]
    InvalidComparison(String),
}

/// Headline metrics of one run. Error means are over the final quarter of
/// recorded steps; a divergence step is recorded when the open-loop rollout
/// left the finite range early.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub system: String,
    pub horizon_steps: usize,
    pub filter_err_final_quarter_mean: f64,
    pub open_loop_err_final_quarter_mean: f64,
    pub filter_trace_p_max: f64,
    pub open_loop_trace_p_final: f64,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub open_loop_divergence_step: Option<usize>,
    pub wall_clock_seconds: f64,
}

/// Command-line level knobs applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir_override: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub full_paper_scale: bool,
}

/// Name of the environment variable holding the default output root.
pub const OUT_ROOT_ENV: &str = "NEURAL_FILTER_OUT";

/// Resolution order: explicit `--out-dir`, then the config's `out_dir`, then
/// `$NEURAL_FILTER_OUT/<name>`, then `runs/<name>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    if let Some(dir) = &opts.out_dir_override {
        return dir.clone();
    }
    if let Some(dir) = &cfg.out_dir {
        return dir.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.name)
}

/// Applies `--seed-override N`: data N, init N+1, train N+2, noise N+3.
fn effective_config(cfg: &ExperimentConfig, opts: &RunOptions) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if let Some(base) = opts.seed_override {
        cfg.data_seed = base;
        cfg.init_seed = base.wrapping_add(1);
        cfg.train.seed = base.wrapping_add(2);
        cfg.noise_seed = base.wrapping_add(3);
    }
    if opts.full_paper_scale {
        if let Some(full) = cfg.n_samples_full {
            cfg.n_samples = full;
        }
    }
    cfg
}

fn stage<T, E: std::fmt::Display>(
    name: &'static str,
    result: Result<T, E>,
) -> Result<T, ExperimentError> {
    result.map_err(|e| ExperimentError::Stage {
        stage: name,
        message: e.to_string(),
    })
}

pub(crate) fn final_quarter_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let q = values.len().div_ceil(4);
    let tail = &values[values.len() - q..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn write_failed_marker(dir: &Path, err: &ExperimentError) {
    // Best effort; the original error is what matters.
    let _ = std::fs::write(dir.join(".failed"), format!("{err}\n"));
}

/// Runs a full case study into its output directory and returns the summary.
pub fn run_case_study(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<RunSummary, ExperimentError> {
    let cfg = effective_config(cfg, opts);
    let out_dir = resolve_out_dir(&cfg, opts);
    std::fs::create_dir_all(&out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.clone(),
        source,
    })?;
    // A fresh run invalidates any stale marker.
    let _ = std::fs::remove_file(out_dir.join(".failed"));

    match run_stages(&cfg, &out_dir) {
        Ok(summary) => Ok(summary),
        Err(err) => {
            write_failed_marker(&out_dir, &err);
            Err(err)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, ExperimentError> {
    let started = Instant::now();

    let dataset = stage(
        "generate",
        generate_dataset(
            &cfg.system,
            &cfg.sample_box,
            cfg.n_samples,
            cfg.ts,
            &cfg.integrator,
            cfg.data_seed,
        ),
    )?;

    let model0 = stage(
        "init",
        if cfg.bias_enabled {
            MlpModel::init(cfg.system.dim(), &cfg.layers, cfg.init_seed)
        } else {
            MlpModel::init_bias_free(cfg.system.dim(), &cfg.layers, cfg.init_seed)
        },
    )?;

    let (model, trace) = stage("train", train(&model0, &dataset, &cfg.train))?;
    stage("save-model", model.save(out_dir.join("model.bin")))?;
    emit::write_loss_csv(out_dir.join("loss.csv"), &trace)?;
    emit::write_loss_csv_smoothed(out_dir.join("loss_smoothed.csv"), &trace)?;

    let filter_cfg = stage("filter-config", cfg.filter_config())?;

    let traj = stage(
        "simulate",
        simulate_truth(
            &cfg.system,
            &cfg.measurement,
            &cfg.x0_true,
            cfg.horizon_steps,
            cfg.ts,
            &cfg.integrator,
            cfg.noise_seed,
        ),
    )?;

    let open_loop = stage(
        "open-loop",
        open_loop_rollout(
            &model,
            &cfg.x0_true,
            cfg.horizon_steps,
            &filter_cfg,
            Some(&traj),
        ),
    )?;
    let filtered = stage("filter", run_filter(&model, &traj, &filter_cfg))?;

    emit::write_trajectory_csv(out_dir.join("trajectory_filter.csv"), &traj, &filtered)?;
    emit::write_trajectory_csv(out_dir.join("trajectory_open_loop.csv"), &traj, &open_loop)?;

    // Post-training losses over the same deterministic split used in train().
    let (train_part, val_part) = stage(
        "summary",
        split_dataset(&dataset, cfg.train.split_fraction, cfg.train.seed),
    )?;
    let final_train_loss = stage(
        "summary",
        mean_squared_error(&model, train_part.inputs(), train_part.targets()),
    )?;
    let final_val_loss = stage(
        "summary",
        mean_squared_error(&model, val_part.inputs(), val_part.targets()),
    )?;

    let summary = summarize(
        cfg,
        &filtered,
        &open_loop,
        Some(final_train_loss),
        Some(final_val_loss),
        started.elapsed().as_secs_f64(),
    )?;
    emit::write_summary(out_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

pub(crate) fn summarize(
    cfg: &ExperimentConfig,
    filtered: &FilterRecord,
    open_loop: &FilterRecord,
    final_train_loss: Option<f64>,
    final_val_loss: Option<f64>,
    wall_clock_seconds: f64,
) -> Result<RunSummary, ExperimentError> {
    let filter_errors = filtered
        .error_norms
        .as_ref()
        .ok_or_else(|| ExperimentError::InvalidRecord("filter record lacks error norms".into()))?;
    let open_errors = open_loop.error_norms.as_ref().ok_or_else(|| {
        ExperimentError::InvalidRecord("open-loop record lacks error norms".into())
    })?;
    let filter_trace_p_max = filtered
        .covariance_traces
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let open_loop_trace_p_final = open_loop
        .covariance_traces
        .last()
        .copied()
        .unwrap_or(f64::NAN);
    Ok(RunSummary {
        system: cfg.system.name().to_string(),
        horizon_steps: cfg.horizon_steps,
        filter_err_final_quarter_mean: final_quarter_mean(filter_errors),
        open_loop_err_final_quarter_mean: final_quarter_mean(open_errors),
        filter_trace_p_max,
        open_loop_trace_p_final,
        final_train_loss,
        final_val_loss,
        open_loop_divergence_step: open_loop.divergence_step,
        wall_clock_seconds,
    })
}

/// Relative standing of two runs of the same case study.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub system: String,
    pub horizon_steps: usize,
    pub filter_error_ratio: f64,
    pub open_loop_error_ratio: f64,
}

impl std::fmt::Display for CompareReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "system: {} ({} steps)", self.system, self.horizon_steps)?;
        writeln!(
            f,
            "filter error ratio (a / b):    {:.6}",
            self.filter_error_ratio
        )?;
        write!(
            f,
            "open-loop error ratio (a / b): {:.6}",
            self.open_loop_error_ratio
        )
    }
}

/// Ratios of run `a`'s errors to run `b`'s. Both summaries must describe the
/// same system and horizon.
pub fn compare_runs(a: &RunSummary, b: &RunSummary) -> Result<CompareReport, ExperimentError> {
    if a.system != b.system {
        return Err(ExperimentError::InvalidComparison(format!(
            "systems differ: `{}` vs `{}`",
            a.system, b.system
        )));
    }
    if a.horizon_steps != b.horizon_steps {
        return Err(ExperimentError::InvalidComparison(format!(
            "horizons differ: {} vs {}",
            a.horizon_steps, b.horizon_steps
        )));
    }
    Ok(CompareReport {
        system: a.system.clone(),
        horizon_steps: a.horizon_steps,
        filter_error_ratio: a.filter_err_final_quarter_mean / b.filter_err_final_quarter_mean,
        open_loop_error_ratio: a.open_loop_err_final_quarter_mean
            / b.open_loop_err_final_quarter_mean,
    })
}

/// Generate the dataset, train, and persist the model plus loss traces;
/// no simulation or estimation. Returns the final (train, validation) MSE.
pub fn train_only(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(f64, f64), ExperimentError> {
    let cfg = effective_config(cfg, opts);
    let out_dir = resolve_out_dir(&cfg, opts);
    std::fs::create_dir_all(&out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let _ = std::fs::remove_file(out_dir.join(".failed"));

    let result = (|| {
        let dataset = stage(
            "generate",
            generate_dataset(
                &cfg.system,
                &cfg.sample_box,
                cfg.n_samples,
                cfg.ts,
                &cfg.integrator,
                cfg.data_seed,
            ),
        )?;
        let model0 = stage(
            "init",
            if cfg.bias_enabled {
                MlpModel::init(cfg.system.dim(), &cfg.layers, cfg.init_seed)
            } else {
                MlpModel::init_bias_free(cfg.system.dim(), &cfg.layers, cfg.init_seed)
            },
        )?;
        let (model, trace) = stage("train", train(&model0, &dataset, &cfg.train))?;
        stage("save-model", model.save(out_dir.join("model.bin")))?;
        emit::write_loss_csv(out_dir.join("loss.csv"), &trace)?;
        emit::write_loss_csv_smoothed(out_dir.join("loss_smoothed.csv"), &trace)?;

        let (train_part, val_part) = stage(
            "summary",
            split_dataset(&dataset, cfg.train.split_fraction, cfg.train.seed),
        )?;
        let t = stage(
            "summary",
            mean_squared_error(&model, train_part.inputs(), train_part.targets()),
        )?;
        let v = stage(
            "summary",
            mean_squared_error(&model, val_part.inputs(), val_part.targets()),
        )?;
        Ok((t, v))
    })();

    if let Err(err) = &result {
        write_failed_marker(&out_dir, err);
    }
    result
}

/// Estimation only: loads a previously trained model and runs the
/// simulate / open-loop / filter stages of [`run_case_study`].
pub fn filter_only(
    cfg: &ExperimentConfig,
    model_path: &Path,
    opts: &RunOptions,
) -> Result<RunSummary, ExperimentError> {
    let cfg = effective_config(cfg, opts);
    let out_dir = resolve_out_dir(&cfg, opts);
    std::fs::create_dir_all(&out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.clone(),
        source,
    })?;
    let _ = std::fs::remove_file(out_dir.join(".failed"));

    let result = (|| {
        let model = stage("load-model", MlpModel::load(model_path))?;
        if model.input_dim() != cfg.system.dim() || model.output_dim() != cfg.system.dim() {
            return Err(ExperimentError::Stage {
                stage: "load-model",
                message: format!(
                    "model maps {} -> {}, system has dimension {}",
                    model.input_dim(),
                    model.output_dim(),
                    cfg.system.dim()
                ),
            });
        }
        let filter_cfg = stage("filter-config", cfg.filter_config())?;
        let traj = stage(
            "simulate",
            simulate_truth(
                &cfg.system,
                &cfg.measurement,
                &cfg.x0_true,
                cfg.horizon_steps,
                cfg.ts,
                &cfg.integrator,
                cfg.noise_seed,
            ),
        )?;
        let open_loop = stage(
            "open-loop",
            open_loop_rollout(
                &model,
                &cfg.x0_true,
                cfg.horizon_steps,
                &filter_cfg,
                Some(&traj),
            ),
        )?;
        let filtered = stage("filter", run_filter(&model, &traj, &filter_cfg))?;
        emit::write_trajectory_csv(out_dir.join("trajectory_filter.csv"), &traj, &filtered)?;
        emit::write_trajectory_csv(out_dir.join("trajectory_open_loop.csv"), &traj, &open_loop)?;

        let summary = summarize(&cfg, &filtered, &open_loop, None, None, 0.0)?;
        emit::write_summary(out_dir.join("summary.txt"), &summary)?;
        Ok(summary)
    })();

    if let Err(err) = &result {
        write_failed_marker(&out_dir, err);
    }
    result
}
