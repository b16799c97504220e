//! One-step flow datasets and mini-batch Adam training.
//!
//! A dataset pairs sampled initial states with the state one sampling
//! interval later, computed by the adaptive integrator. Training minimizes
//! the mean squared error over shuffled mini-batches with exact
//! backpropagation gradients (including the ReLU-at-zero convention of the
//! network module). An 80/20 split is carved off up front and the held-out
//! part is scored periodically.
//!
//! All randomness flows through explicitly seeded generators and the batch
//! reduction order is sequential, so a fixed (model seed, data seed, train
//! seed, config) tuple reproduces parameters and traces bit for bit.

mod adam;

pub use adam::{adam_step, AdamError, AdamState};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{
    integrate_interval, ControlInput, DynamicsError, IntegratorConfig, OdeSystem, StateVector,
};
use crate::mlp::{MlpError, MlpModel};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("integration failed for sample {index}: {source}")]
    SampleIntegration {
        index: usize,
        #[source]
        source: DynamicsError,
    },
    #[error("split would leave an empty partition (n = {n}, fraction = {fraction})")]
    EmptyPartition { n: usize, fraction: f64 },
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged {
        iteration: u64,
        trace: Box<LossTrace>,
    },
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Axis-aligned box the initial states are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl SampleBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, TrainingError> {
        if lower.len() != upper.len() {
            return Err(TrainingError::DimensionMismatch {
                what: "sample box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(TrainingError::InvalidConfig("sample box is empty".into()));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(TrainingError::InvalidConfig(format!(
                    "bound {i}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(SampleBox {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(lo, hi)| rng.random_range(*lo..*hi)),
        )
    }
}

/// Paired (initial state, one-step flow target) samples at timestep `ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    ts: f64,
}

impl Dataset {
    pub fn new(
        inputs: Vec<DVector<f64>>,
        targets: Vec<DVector<f64>>,
        ts: f64,
    ) -> Result<Self, TrainingError> {
        if inputs.len() != targets.len() {
            return Err(TrainingError::DimensionMismatch {
                what: "dataset rows",
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        if inputs.is_empty() {
            return Err(TrainingError::InvalidConfig("dataset is empty".into()));
        }
        if !(ts.is_finite() && ts > 0.0) {
            return Err(TrainingError::InvalidConfig(format!(
                "ts = {ts} must be finite and > 0"
            )));
        }
        let in_dim = inputs[0].len();
        let out_dim = targets[0].len();
        for (i, (x, y)) in inputs.iter().zip(&targets).enumerate() {
            if x.len() != in_dim || y.len() != out_dim {
                return Err(TrainingError::InvalidConfig(format!(
                    "row {i} has inconsistent dimensions"
                )));
            }
        }
        Ok(Dataset { inputs, targets, ts })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn target_dim(&self) -> usize {
        self.targets[0].len()
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub split_fraction: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub validation_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            split_fraction: 0.8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            validation_every: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(TrainingError::InvalidConfig(format!(
                "split_fraction = {} must lie in (0, 1)",
                self.split_fraction
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainingError::InvalidConfig(format!(
                "learning_rate = {} must be finite and > 0",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(TrainingError::InvalidConfig(format!(
                    "{name} = {b} must lie in [0, 1)"
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TrainingError::InvalidConfig(format!(
                "epsilon = {} must be finite and > 0",
                self.epsilon
            )));
        }
        if self.validation_every == 0 {
            return Err(TrainingError::InvalidConfig(
                "validation_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Raw per-iteration training losses and the periodically recorded
/// validation losses. Smoothing happens only on the way out, in emission.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub iterations: Vec<u64>,
    pub train_losses: Vec<f64>,
    pub val_iterations: Vec<u64>,
    pub val_losses: Vec<f64>,
}

impl LossTrace {
    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Trailing moving average over `window` points of both series.
    pub fn smoothed(&self, window: usize) -> (Vec<f64>, Vec<f64>) {
        (
            moving_average(&self.train_losses, window),
            moving_average(&self.val_losses, window),
        )
    }
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i.min(w - 1) + 1) as f64);
    }
    out
}

/// Draws `n_samples` initial states uniformly from `sample_box` and pairs
/// each with its flow over `ts`. Deterministic per seed.
pub fn generate_dataset(
    system: &OdeSystem,
    sample_box: &SampleBox,
    n_samples: usize,
    ts: f64,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Dataset, TrainingError> {
    if n_samples == 0 {
        return Err(TrainingError::InvalidConfig("n_samples must be >= 1".into()));
    }
    if sample_box.dim() != system.dim() {
        return Err(TrainingError::DimensionMismatch {
            what: "sample box dimension",
            expected: system.dim(),
            got: sample_box.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = ControlInput::empty();
    let mut inputs = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let x0 = sample_box.sample(&mut rng);
        let state = StateVector::from_dvector(x0.clone())
            .map_err(|source| TrainingError::SampleIntegration { index, source })?;
        let target = integrate_interval(system, &state, &u, ts, cfg)
            .map_err(|source| TrainingError::SampleIntegration { index, source })?;
        inputs.push(x0);
        targets.push(target.into_dvector());
    }
    Dataset::new(inputs, targets, ts)
}

/// Splits into a `floor(n * fraction)`-row part and the remainder after a
/// seeded shuffle. The two parts are disjoint and together contain every row.
pub fn split_dataset(
    data: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), TrainingError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainingError::InvalidConfig(format!(
            "split fraction = {fraction} must lie in (0, 1)"
        )));
    }
    let n = data.len();
    let n_first = (n as f64 * fraction).floor() as usize;
    if n_first == 0 || n_first == n {
        return Err(TrainingError::EmptyPartition { n, fraction });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let collect = |idx: &[usize]| -> Result<Dataset, TrainingError> {
        Dataset::new(
            idx.iter().map(|&i| data.inputs[i].clone()).collect(),
            idx.iter().map(|&i| data.targets[i].clone()).collect(),
            data.ts,
        )
    };
    Ok((collect(&indices[..n_first])?, collect(&indices[n_first..])?))
}

/// Mean squared error of the model over a set of rows, averaged over samples
/// and output components.
pub fn mean_squared_error(
    model: &MlpModel,
    inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
) -> Result<f64, MlpError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(MlpError::DimensionMismatch {
            what: "mse rows",
            expected: inputs.len().max(1),
            got: targets.len(),
        });
    }
    let mut sum = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let out = model.forward(x)?;
        sum += (out - y).norm_squared();
    }
    Ok(sum / (inputs.len() * targets[0].len()) as f64)
}

// The batch-shuffle stream is decoupled from the split stream so the two
// draws stay independent under a shared seed.
const SHUFFLE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains a copy of `model` on `data` and returns it with the loss trace.
///
/// The dataset is split internally (`split_fraction`, seeded by `cfg.seed`);
/// validation always scores rows no training batch ever sees. A non-finite
/// batch loss aborts with the trace recorded so far. `epochs = 0` returns the
/// model unchanged with an empty trace.
pub fn train(
    model: &MlpModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, LossTrace), TrainingError> {
    cfg.validate()?;
    if data.input_dim() != model.input_dim() {
        return Err(TrainingError::DimensionMismatch {
            what: "dataset input dimension",
            expected: model.input_dim(),
            got: data.input_dim(),
        });
    }
    if data.target_dim() != model.output_dim() {
        return Err(TrainingError::DimensionMismatch {
            what: "dataset target dimension",
            expected: model.output_dim(),
            got: data.target_dim(),
        });
    }

    let (train_set, val_set) = split_dataset(data, cfg.split_fraction, cfg.seed)?;
    let mut trained = model.clone();
    let mut trace = LossTrace::default();
    if cfg.epochs == 0 {
        return Ok((trained, trace));
    }

    let layer_count = trained.layers().len();
    let mut grad_w: Vec<DMatrix<f64>> = trained
        .weights()
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut grad_b: Vec<DVector<f64>> = trained
        .biases()
        .iter()
        .map(|b| DVector::zeros(b.len()))
        .collect();
    let mut state_w: Vec<AdamState> = grad_w.iter().map(|g| AdamState::zeros(g.len())).collect();
    let mut state_b: Vec<AdamState> = grad_b.iter().map(|g| AdamState::zeros(g.len())).collect();

    let update_biases = trained.bias_enabled();
    let out_dim = trained.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SEED_SALT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iteration: u64 = 0;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            iteration += 1;
            for g in &mut grad_w {
                g.fill(0.0);
            }
            for g in &mut grad_b {
                g.fill(0.0);
            }
            let scale = 2.0 / (batch.len() * out_dim) as f64;
            let mut batch_loss = 0.0;

            for &row in batch {
                let x = &train_set.inputs[row];
                let y = &train_set.targets[row];
                let (preacts, acts) = trained.forward_trace(x)?;
                let residual = &acts[layer_count] - y;
                batch_loss += residual.norm_squared();

                // Backward sweep; the output layer is linear so the residual
                // passes through unmodified.
                let mut delta = residual * scale;
                for layer in (0..layer_count).rev() {
                    if trained.layers()[layer].activation == crate::mlp::Activation::Relu {
                        for (i, z) in preacts[layer].iter().enumerate() {
                            if *z <= 0.0 {
                                delta[i] = 0.0;
                            }
                        }
                    }
                    grad_w[layer].ger(1.0, &delta, &acts[layer], 1.0);
                    grad_b[layer] += &delta;
                    if layer > 0 {
                        delta = trained.weights()[layer].transpose() * delta;
                    }
                }
            }

            let loss = batch_loss / (batch.len() * out_dim) as f64;
            if !loss.is_finite() {
                return Err(TrainingError::Diverged {
                    iteration,
                    trace: Box::new(trace),
                });
            }
            trace.iterations.push(iteration);
            trace.train_losses.push(loss);

            {
                let (weights, biases) = trained.tensors_mut();
                for layer in 0..layer_count {
                    adam_step(
                        weights[layer].as_mut_slice(),
                        grad_w[layer].as_slice(),
                        &mut state_w[layer],
                        iteration,
                        cfg,
                    )?;
                    if update_biases {
                        adam_step(
                            biases[layer].as_mut_slice(),
                            grad_b[layer].as_slice(),
                            &mut state_b[layer],
                            iteration,
                            cfg,
                        )?;
                    }
                }
            }

            if iteration.is_multiple_of(cfg.validation_every as u64) {
                let val_loss = mean_squared_error(&trained, val_set.inputs(), val_set.targets())?;
                trace.val_iterations.push(iteration);
                trace.val_losses.push(val_loss);
            }
        }
    }

    Ok((trained, trace))
}
