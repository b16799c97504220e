//! Deterministic artifact emission.
//!
//! All floats are rendered with 17 significant digits (`{:.16e}`), lines end
//! with `\n`, and headers are always written, so identical runs produce
//! byte-identical files.
//!
//! Trajectory CSV schema:
//! `k,t,x_true_1..n,y_1..m,xhat_prior_1..n,xhat_post_1..n,err_norm,trace_P`
//!
//! Loss CSV schema: `iteration,train_loss,val_loss`, with `val_loss` empty on
//! iterations where no validation happened. The smoothed variant applies a
//! trailing moving average (window 25) to both series; the raw trace is
//! always emitted alongside it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::run::RunSummary;
use super::ExperimentError;
use crate::dynamics::Trajectory;
use crate::filter::FilterRecord;
use crate::training::LossTrace;

pub(crate) const SMOOTHING_WINDOW: usize = 25;

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes one estimation run against its ground truth. The record may be a
/// finite prefix of the trajectory (after a recorded divergence); rows are
/// emitted only for recorded steps.
pub fn write_trajectory_csv(
    path: impl AsRef<Path>,
    traj: &Trajectory,
    record: &FilterRecord,
) -> Result<(), ExperimentError> {
    let n = traj.state_dim();
    let m = traj
        .measurements()
        .first()
        .map(|y| y.len())
        .unwrap_or_default();
    if record.len() > traj.len() {
        return Err(ExperimentError::InvalidRecord(format!(
            "record has {} steps but trajectory has {}",
            record.len(),
            traj.len()
        )));
    }
    let errors = record
        .error_norms
        .as_ref()
        .ok_or_else(|| ExperimentError::InvalidRecord("record carries no error norms".into()))?;

    let mut out = String::new();
    out.push_str("k,t");
    for i in 1..=n {
        let _ = write!(out, ",x_true_{i}");
    }
    for i in 1..=m {
        let _ = write!(out, ",y_{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",xhat_prior_{i}");
    }
    for i in 1..=n {
        let _ = write!(out, ",xhat_post_{i}");
    }
    out.push_str(",err_norm,trace_P\n");

    for (idx, err) in errors.iter().enumerate().take(record.len()) {
        let k = idx + 1;
        let _ = write!(out, "{k},{}", fmt_float(traj.times()[idx]));
        for v in traj.true_states()[idx].iter() {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        for v in traj.measurements()[idx].iter() {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        for v in record.priors[idx].iter() {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        for v in record.posteriors[idx].iter() {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        let _ = write!(
            out,
            ",{},{}",
            fmt_float(*err),
            fmt_float(record.covariance_traces[idx])
        );
        out.push('\n');
    }
    write_file(path.as_ref(), &out)
}

fn loss_csv_contents(trace: &LossTrace, train: &[f64], val: &[f64]) -> String {
    let mut out = String::from("iteration,train_loss,val_loss\n");
    let mut next_val = 0usize;
    for (i, &iter) in trace.iterations.iter().enumerate() {
        let _ = write!(out, "{iter},{}", fmt_float(train[i]));
        if next_val < trace.val_iterations.len() && trace.val_iterations[next_val] == iter {
            let _ = write!(out, ",{}", fmt_float(val[next_val]));
            next_val += 1;
        } else {
            out.push(',');
        }
        out.push('\n');
    }
    out
}

/// Raw per-iteration losses.
pub fn write_loss_csv(path: impl AsRef<Path>, trace: &LossTrace) -> Result<(), ExperimentError> {
    write_file(
        path.as_ref(),
        &loss_csv_contents(trace, &trace.train_losses, &trace.val_losses),
    )
}

/// Moving-average view of the same trace, for log-scale inspection.
pub fn write_loss_csv_smoothed(
    path: impl AsRef<Path>,
    trace: &LossTrace,
) -> Result<(), ExperimentError> {
    let (train, val) = trace.smoothed(SMOOTHING_WINDOW);
    write_file(path.as_ref(), &loss_csv_contents(trace, &train, &val))
}

pub fn write_summary(path: impl AsRef<Path>, summary: &RunSummary) -> Result<(), ExperimentError> {
    let mut out = String::new();
    let _ = writeln!(out, "system = {}", summary.system);
    let _ = writeln!(out, "horizon_steps = {}", summary.horizon_steps);
    let _ = writeln!(
        out,
        "filter_err_final_quarter_mean = {}",
        fmt_float(summary.filter_err_final_quarter_mean)
    );
    let _ = writeln!(
        out,
        "open_loop_err_final_quarter_mean = {}",
        fmt_float(summary.open_loop_err_final_quarter_mean)
    );
    let _ = writeln!(
        out,
        "filter_trace_p_max = {}",
        fmt_float(summary.filter_trace_p_max)
    );
    let _ = writeln!(
        out,
        "open_loop_trace_p_final = {}",
        fmt_float(summary.open_loop_trace_p_final)
    );
    if let Some(v) = summary.final_train_loss {
        let _ = writeln!(out, "final_train_loss = {}", fmt_float(v));
    }
    if let Some(v) = summary.final_val_loss {
        let _ = writeln!(out, "final_val_loss = {}", fmt_float(v));
    }
    if let Some(step) = summary.open_loop_divergence_step {
        let _ = writeln!(out, "open_loop_divergence_step = {step}");
    }
    let _ = writeln!(
        out,
        "wall_clock_seconds = {}",
        fmt_float(summary.wall_clock_seconds)
    );
    write_file(path.as_ref(), &out)
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<RunSummary, ExperimentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut fields = std::collections::BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ExperimentError::InvalidSummary {
                path: path.to_path_buf(),
                message: format!("line {}: expected `key = value`", idx + 1),
            })?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let mut get_f64 = |key: &str| -> Result<f64, ExperimentError> {
        let raw = fields
            .remove(key)
            .ok_or_else(|| ExperimentError::InvalidSummary {
                path: path.to_path_buf(),
                message: format!("missing key `{key}`"),
            })?;
        raw.parse().map_err(|e| ExperimentError::InvalidSummary {
            path: path.to_path_buf(),
            message: format!("key `{key}`: {e}"),
        })
    };
    let filter_err = get_f64("filter_err_final_quarter_mean")?;
    let open_err = get_f64("open_loop_err_final_quarter_mean")?;
    let trace_max = get_f64("filter_trace_p_max")?;
    let trace_final = get_f64("open_loop_trace_p_final")?;
    let wall = get_f64("wall_clock_seconds")?;

    let system = fields
        .remove("system")
        .ok_or_else(|| ExperimentError::InvalidSummary {
            path: path.to_path_buf(),
            message: "missing key `system`".into(),
        })?;
    let horizon_steps = fields
        .remove("horizon_steps")
        .ok_or_else(|| ExperimentError::InvalidSummary {
            path: path.to_path_buf(),
            message: "missing key `horizon_steps`".into(),
        })?
        .parse()
        .map_err(|e| ExperimentError::InvalidSummary {
            path: path.to_path_buf(),
            message: format!("key `horizon_steps`: {e}"),
        })?;
    let parse_opt = |raw: Option<String>| -> Result<Option<f64>, ExperimentError> {
        raw.map(|s| {
            s.parse().map_err(|e| ExperimentError::InvalidSummary {
                path: path.to_path_buf(),
                message: format!("{e}"),
            })
        })
        .transpose()
    };
    let final_train_loss = parse_opt(fields.remove("final_train_loss"))?;
    let final_val_loss = parse_opt(fields.remove("final_val_loss"))?;
    let open_loop_divergence_step = fields
        .remove("open_loop_divergence_step")
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| ExperimentError::InvalidSummary {
                    path: path.to_path_buf(),
                    message: format!("key `open_loop_divergence_step`: {e}"),
                })
        })
        .transpose()?;

    Ok(RunSummary {
        system,
        horizon_steps,
        filter_err_final_quarter_mean: filter_err,
        open_loop_err_final_quarter_mean: open_err,
        filter_trace_p_max: trace_max,
        open_loop_trace_p_final: trace_final,
        final_train_loss,
        final_val_loss,
        open_loop_divergence_step,
        wall_clock_seconds: wall,
    })
}
