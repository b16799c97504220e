//! Experiment description files.
//!
//! The format is a flat, sectioned key-value text file:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Values are scalars (`0.1`, `15000`, `true`), comma-separated vectors
//! (`-1.5, 5.0`), semicolon-separated matrices (`1, 0; 0, 1`), or layer
//! lists (`10 relu, 2 linear`). `#` starts a comment anywhere on a line.
//! Recognized sections are `[system]`, `[data]`, `[nn]`, `[train]`,
//! `[measurement]`, `[filter]` and `[run]`. Unknown sections, unknown keys,
//! duplicate keys and missing required keys are all hard errors.
//!
//! See the crate README for the full key reference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{IntegratorConfig, MeasurementModel, OdeSystem, StateVector};
use crate::filter::FilterConfig;
use crate::mlp::{Activation, LayerSpec};
use crate::training::{SampleBox, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { name: String, line: usize },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("missing required section [{0}]")]
    MissingSection(String),
    #[error("missing required key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue {
        key: String,
        line: usize,
        message: String,
    },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

const SECTIONS: &[&str] = &[
    "system",
    "data",
    "nn",
    "train",
    "measurement",
    "filter",
    "run",
];

struct RawSection {
    entries: BTreeMap<String, (usize, String)>,
}

fn parse_raw(text: &str) -> Result<BTreeMap<String, RawSection>, ConfigError> {
    let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ConfigError::Syntax {
                line: line_no,
                message: "unterminated section header".into(),
            })?;
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::UnknownSection {
                    name: name.into(),
                    line: line_no,
                });
            }
            if sections.contains_key(name) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("duplicate section [{name}]"),
                });
            }
            sections.insert(
                name.to_string(),
                RawSection {
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
            line: line_no,
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: "empty key".into(),
            });
        }
        let section_name = current.clone().ok_or(ConfigError::Syntax {
            line: line_no,
            message: "key before any [section]".into(),
        })?;
        let section = sections.get_mut(&section_name).expect("section exists");
        if section
            .entries
            .insert(key.clone(), (line_no, value))
            .is_some()
        {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: format!("duplicate key `{key}` in [{section_name}]"),
            });
        }
    }
    Ok(sections)
}

/// Typed view over one raw section that tracks which keys were consumed, so
/// leftovers can be rejected.
struct SectionReader<'a> {
    name: &'a str,
    entries: BTreeMap<String, (usize, String)>,
}

impl<'a> SectionReader<'a> {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<(usize, String), ConfigError> {
        self.take(key).ok_or_else(|| ConfigError::MissingKey {
            section: self.name.into(),
            key: key.into(),
        })
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(ConfigError::UnknownKey {
                section: self.name.into(),
                key,
                line,
            });
        }
        Ok(())
    }
}

fn bad(key: &str, line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        line,
        message: message.into(),
    }
}

fn parse_f64(key: &str, line: usize, s: &str) -> Result<f64, ConfigError> {
    let v: f64 = s
        .parse()
        .map_err(|e| bad(key, line, format!("not a number: {e}")))?;
    if !v.is_finite() {
        return Err(bad(key, line, "must be finite"));
    }
    Ok(v)
}

fn parse_usize(key: &str, line: usize, s: &str) -> Result<usize, ConfigError> {
    s.parse()
        .map_err(|e| bad(key, line, format!("not a non-negative integer: {e}")))
}

fn parse_u64(key: &str, line: usize, s: &str) -> Result<u64, ConfigError> {
    s.parse()
        .map_err(|e| bad(key, line, format!("not a non-negative integer: {e}")))
}

fn parse_bool(key: &str, line: usize, s: &str) -> Result<bool, ConfigError> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, line, "expected `true` or `false`")),
    }
}

fn parse_vector(key: &str, line: usize, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .map(|part| parse_f64(key, line, part.trim()))
        .collect()
}

fn parse_matrix(key: &str, line: usize, s: &str) -> Result<DMatrix<f64>, ConfigError> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|row| parse_vector(key, line, row.trim()))
        .collect::<Result<_, _>>()?;
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(bad(key, line, "rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(flat.len() / ncols, ncols, &flat))
}

fn parse_layers(key: &str, line: usize, s: &str) -> Result<Vec<LayerSpec>, ConfigError> {
    s.split(',')
        .map(|entry| {
            let mut parts = entry.split_whitespace();
            let width = parts
                .next()
                .ok_or_else(|| bad(key, line, "empty layer entry"))
                .and_then(|w| parse_usize(key, line, w))?;
            let act = parts
                .next()
                .ok_or_else(|| bad(key, line, "layer entry needs `<width> <activation>`"))?;
            if parts.next().is_some() {
                return Err(bad(key, line, "layer entry has trailing tokens"));
            }
            let activation: Activation = act
                .parse()
                .map_err(|_| bad(key, line, format!("unknown activation `{act}`")))?;
            Ok(LayerSpec { width, activation })
        })
        .collect()
}

/// A scalar `v` means `v * I_n`; otherwise a full `n x n` matrix.
fn parse_scaled_matrix(
    key: &str,
    line: usize,
    s: &str,
    n: usize,
) -> Result<DMatrix<f64>, ConfigError> {
    if !s.contains(',') && !s.contains(';') {
        let v = parse_f64(key, line, s)?;
        return Ok(DMatrix::identity(n, n) * v);
    }
    let m = parse_matrix(key, line, s)?;
    if m.nrows() != n || m.ncols() != n {
        return Err(bad(
            key,
            line,
            format!("expected a {n}x{n} matrix, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m)
}

/// Full declarative description of one case study.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: OdeSystem,
    pub ts: f64,
    pub horizon_steps: usize,
    pub sample_box: SampleBox,
    pub n_samples: usize,
    pub n_samples_full: Option<usize>,
    pub data_seed: u64,
    pub integrator: IntegratorConfig,
    pub layers: Vec<LayerSpec>,
    pub init_seed: u64,
    pub bias_enabled: bool,
    pub train: TrainConfig,
    pub measurement: MeasurementModel,
    pub noise_seed: u64,
    pub q: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub x0_hat: DVector<f64>,
    pub x0_true: StateVector,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "experiment".into());
        Self::from_str_named(&text, &stem)
    }

    pub fn from_str_named(text: &str, default_name: &str) -> Result<Self, ConfigError> {
        let mut raw = parse_raw(text)?;
        let mut reader = |name: &'static str| -> Result<SectionReader<'static>, ConfigError> {
            raw.remove(name)
                .map(|s| SectionReader {
                    name,
                    entries: s.entries,
                })
                .ok_or_else(|| ConfigError::MissingSection(name.into()))
        };

        // [system]
        let mut sys = reader("system")?;
        let (name_line, system_name) = sys.require("name")?;
        let mut params = BTreeMap::new();
        for key in ["g", "l", "mu", "sigma", "rho", "beta", "m1", "m2", "l1", "l2"] {
            if let Some((line, value)) = sys.take(key) {
                params.insert(key.to_string(), parse_f64(key, line, &value)?);
            }
        }
        sys.finish()?;
        let system = OdeSystem::from_name(&system_name, &params)
            .map_err(|e| bad("name", name_line, e.to_string()))?;
        let n = system.dim();

        // [data]
        let mut data = reader("data")?;
        let ts = {
            let (line, v) = data.require("ts")?;
            let ts = parse_f64("ts", line, &v)?;
            if ts <= 0.0 {
                return Err(bad("ts", line, "must be > 0"));
            }
            ts
        };
        let n_samples = {
            let (line, v) = data.require("n_samples")?;
            let n = parse_usize("n_samples", line, &v)?;
            if n == 0 {
                return Err(bad("n_samples", line, "must be >= 1"));
            }
            n
        };
        let n_samples_full = data
            .take("n_samples_full")
            .map(|(line, v)| parse_usize("n_samples_full", line, &v))
            .transpose()?;
        let box_lower = {
            let (line, v) = data.require("box_lower")?;
            parse_vector("box_lower", line, &v)?
        };
        let box_upper = {
            let (line, v) = data.require("box_upper")?;
            parse_vector("box_upper", line, &v)?
        };
        let sample_box = SampleBox::new(box_lower, box_upper)
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        let data_seed = {
            let (line, v) = data.require("seed")?;
            parse_u64("seed", line, &v)?
        };
        let mut integrator = IntegratorConfig::default();
        if let Some((line, v)) = data.take("rel_tol") {
            integrator.rel_tol = parse_f64("rel_tol", line, &v)?;
        }
        if let Some((line, v)) = data.take("abs_tol") {
            integrator.abs_tol = parse_f64("abs_tol", line, &v)?;
        }
        if let Some((line, v)) = data.take("max_steps") {
            integrator.max_steps = parse_usize("max_steps", line, &v)?;
        }
        if let Some((line, v)) = data.take("initial_step") {
            integrator.initial_step = Some(parse_f64("initial_step", line, &v)?);
        }
        integrator
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        data.finish()?;

        // [nn]
        let mut nn = reader("nn")?;
        let layers = {
            let (line, v) = nn.require("layers")?;
            parse_layers("layers", line, &v)?
        };
        let init_seed = {
            let (line, v) = nn.require("seed")?;
            parse_u64("seed", line, &v)?
        };
        let bias_enabled = match nn.take("biases") {
            Some((line, v)) => parse_bool("biases", line, &v)?,
            None => true,
        };
        nn.finish()?;

        // [train]
        let mut tr = reader("train")?;
        let epochs = {
            let (line, v) = tr.require("epochs")?;
            parse_usize("epochs", line, &v)?
        };
        let train_seed = {
            let (line, v) = tr.require("seed")?;
            parse_u64("seed", line, &v)?
        };
        let mut train = TrainConfig {
            epochs,
            seed: train_seed,
            ..Default::default()
        };
        if let Some((line, v)) = tr.take("batch_size") {
            train.batch_size = parse_usize("batch_size", line, &v)?;
        }
        if let Some((line, v)) = tr.take("split_fraction") {
            train.split_fraction = parse_f64("split_fraction", line, &v)?;
        }
        if let Some((line, v)) = tr.take("learning_rate") {
            train.learning_rate = parse_f64("learning_rate", line, &v)?;
        }
        if let Some((line, v)) = tr.take("beta1") {
            train.beta1 = parse_f64("beta1", line, &v)?;
        }
        if let Some((line, v)) = tr.take("beta2") {
            train.beta2 = parse_f64("beta2", line, &v)?;
        }
        if let Some((line, v)) = tr.take("epsilon") {
            train.epsilon = parse_f64("epsilon", line, &v)?;
        }
        if let Some((line, v)) = tr.take("validation_every") {
            train.validation_every = parse_usize("validation_every", line, &v)?;
        }
        train
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        tr.finish()?;

        // [measurement]
        let mut meas = reader("measurement")?;
        let c_matrix = {
            let (line, v) = meas.require("c_matrix")?;
            parse_matrix("c_matrix", line, &v)?
        };
        let sigma_v = {
            let (line, v) = meas.require("sigma_v")?;
            parse_f64("sigma_v", line, &v)?
        };
        let noise_seed = {
            let (line, v) = meas.require("seed")?;
            parse_u64("seed", line, &v)?
        };
        meas.finish()?;
        let measurement = MeasurementModel::new(c_matrix, sigma_v)
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;

        // [filter]
        let mut filt = reader("filter")?;
        let q = {
            let (line, v) = filt.require("q")?;
            parse_scaled_matrix("q", line, &v, n)?
        };
        let p0 = {
            let (line, v) = filt.require("p0")?;
            parse_scaled_matrix("p0", line, &v, n)?
        };
        let x0_hat = match filt.take("x0_hat") {
            Some((line, v)) => DVector::from_vec(parse_vector("x0_hat", line, &v)?),
            None => DVector::zeros(n),
        };
        filt.finish()?;

        // [run]
        let mut run = reader("run")?;
        let name = match run.take("name") {
            Some((_, v)) => v,
            None => default_name.to_string(),
        };
        let x0_true = {
            let (line, v) = run.require("x0_true")?;
            StateVector::new(parse_vector("x0_true", line, &v)?)
                .map_err(|e| bad("x0_true", line, e.to_string()))?
        };
        let horizon_steps = {
            let (line, v) = run.require("horizon_steps")?;
            let h = parse_usize("horizon_steps", line, &v)?;
            if h == 0 {
                return Err(bad("horizon_steps", line, "must be >= 1"));
            }
            h
        };
        let out_dir = run.take("out_dir").map(|(_, v)| PathBuf::from(v));
        run.finish()?;

        if let Some(section) = raw.keys().next() {
            // parse_raw already rejects unknown names; this guards reordering.
            return Err(ConfigError::Inconsistent(format!(
                "unused section [{section}]"
            )));
        }

        let cfg = ExperimentConfig {
            name,
            system,
            ts,
            horizon_steps,
            sample_box,
            n_samples,
            n_samples_full,
            data_seed,
            integrator,
            layers,
            init_seed,
            bias_enabled,
            train,
            measurement,
            noise_seed,
            q,
            p0,
            x0_hat,
            x0_true,
            out_dir,
        };
        cfg.validate_cross()?;
        Ok(cfg)
    }

    fn validate_cross(&self) -> Result<(), ConfigError> {
        let n = self.system.dim();
        if self.sample_box.dim() != n {
            return Err(ConfigError::Inconsistent(format!(
                "sample box has dimension {}, system has {n}",
                self.sample_box.dim()
            )));
        }
        match self.layers.last() {
            Some(last) if last.width == n => {}
            Some(last) => {
                return Err(ConfigError::Inconsistent(format!(
                    "final layer width {} must equal the state dimension {n}",
                    last.width
                )))
            }
            None => return Err(ConfigError::Inconsistent("empty layer list".into())),
        }
        if self.measurement.state_dim() != n {
            return Err(ConfigError::Inconsistent(format!(
                "c_matrix has {} columns, system has dimension {n}",
                self.measurement.state_dim()
            )));
        }
        if self.x0_true.dim() != n {
            return Err(ConfigError::Inconsistent(format!(
                "x0_true has length {}, system has dimension {n}",
                self.x0_true.dim()
            )));
        }
        if self.x0_hat.len() != n {
            return Err(ConfigError::Inconsistent(format!(
                "x0_hat has length {}, system has dimension {n}",
                self.x0_hat.len()
            )));
        }
        if let Some(full) = self.n_samples_full {
            if full == 0 {
                return Err(ConfigError::Inconsistent(
                    "n_samples_full must be >= 1".into(),
                ));
            }
        }
        // The filter config constructor re-checks Q/P0 shape and PSD-ness.
        self.filter_config()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        Ok(())
    }

    pub fn filter_config(&self) -> Result<FilterConfig, crate::filter::FilterError> {
        FilterConfig::new(
            self.q.clone(),
            self.measurement.clone(),
            self.p0.clone(),
            self.x0_hat.clone(),
        )
    }
}
