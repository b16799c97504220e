//! Continuous-time benchmark systems, one-interval integration, and noisy
//! ground-truth simulation.
//!
//! The systems here are the plants whose one-step flow maps the surrogate
//! networks learn. All shipped systems are autonomous; the control-input slot
//! is kept so the sampled-data interface stays general.
//!
//! Everything in this module is pure given its inputs plus an explicit seed,
//! so concurrent use on distinct generators is safe.

mod integrator;
mod systems;

pub use integrator::{integrate_interval, IntegratorConfig};
pub use systems::{CustomOde, OdeSystem};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Errors from system evaluation, integration, and truth simulation.
#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("state contains a non-finite entry at index {index}")]
    NonFiniteState { index: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parameter `{name}` = {value} is invalid: {reason}")]
    InvalidParameter {
        name: String,
        value: f64,
        reason: &'static str,
    },
    #[error("degenerate configuration: |det M| = {det:e} below 1e-12")]
    DegenerateConfiguration { det: f64 },
    #[error("integration exceeded {max_steps} step attempts at t = {t}")]
    StepLimitExceeded { max_steps: usize, t: f64 },
    #[error("integration diverged to a non-finite state near t = {t}")]
    Divergence { t: f64 },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
}

/// State of a system at one instant. Entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DynamicsError> {
        Self::from_dvector(DVector::from_vec(values))
    }

    pub fn from_dvector(values: DVector<f64>) -> Result<Self, DynamicsError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState { index });
        }
        Ok(StateVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_dvector(self) -> DVector<f64> {
        self.0
    }
}

impl std::ops::Deref for StateVector {
    type Target = DVector<f64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// Exogenous input sample, held constant over one integration interval.
/// Empty for all shipped systems.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput(DVector<f64>);

impl ControlInput {
    pub fn new(values: Vec<f64>) -> Result<Self, DynamicsError> {
        let v = DVector::from_vec(values);
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(DynamicsError::NonFiniteState { index });
        }
        Ok(ControlInput(v))
    }

    /// The empty input of an autonomous system.
    pub fn empty() -> Self {
        ControlInput(DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ControlInput {
    fn default() -> Self {
        Self::empty()
    }
}

/// Linear measurement map `y = C x + v` with per-row noise std `sigma_v`.
///
/// The measurement covariance is `R = sigma_v^2 I`. The map is linear in all
/// shipped experiments, so the measurement Jacobian equals `C` everywhere;
/// [`MeasurementModel::jacobian`] is the hook a nonlinear map would override.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    c: DMatrix<f64>,
    sigma_v: f64,
}

impl MeasurementModel {
    pub fn new(c: DMatrix<f64>, sigma_v: f64) -> Result<Self, DynamicsError> {
        if c.nrows() == 0 || c.ncols() == 0 {
            return Err(DynamicsError::InvalidParameter {
                name: "c_matrix".into(),
                value: 0.0,
                reason: "must have at least one row and column",
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidParameter {
                name: "c_matrix".into(),
                value: f64::NAN,
                reason: "entries must be finite",
            });
        }
        if !sigma_v.is_finite() || sigma_v < 0.0 {
            return Err(DynamicsError::InvalidParameter {
                name: "sigma_v".into(),
                value: sigma_v,
                reason: "must be finite and >= 0",
            });
        }
        Ok(MeasurementModel { c, sigma_v })
    }

    pub fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn c_matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn sigma_v(&self) -> f64 {
        self.sigma_v
    }

    /// Measurement covariance `R = sigma_v^2 I`.
    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.c.nrows(), self.c.nrows()) * (self.sigma_v * self.sigma_v)
    }

    /// Measurement Jacobian at a state. Constant for the linear map.
    pub fn jacobian(&self, _x: &DVector<f64>) -> &DMatrix<f64> {
        &self.c
    }

    /// `C x + noise`, with the noise sample supplied explicitly.
    pub fn measure(
        &self,
        x: &StateVector,
        noise: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        if x.dim() != self.c.ncols() {
            return Err(DynamicsError::DimensionMismatch {
                what: "measure: state",
                expected: self.c.ncols(),
                got: x.dim(),
            });
        }
        if noise.len() != self.c.nrows() {
            return Err(DynamicsError::DimensionMismatch {
                what: "measure: noise",
                expected: self.c.nrows(),
                got: noise.len(),
            });
        }
        Ok(&self.c * x.as_dvector() + noise)
    }
}

/// A sampled ground-truth run: states `x_k` and measurements `y_k` at
/// `t = k ts` for `k = 1..=steps`, plus the initial condition `x_0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    initial_state: StateVector,
    ts: f64,
    times: Vec<f64>,
    true_states: Vec<StateVector>,
    measurements: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(
        initial_state: StateVector,
        ts: f64,
        true_states: Vec<StateVector>,
        measurements: Vec<DVector<f64>>,
    ) -> Result<Self, DynamicsError> {
        if !(ts.is_finite() && ts > 0.0) {
            return Err(DynamicsError::InvalidParameter {
                name: "ts".into(),
                value: ts,
                reason: "must be finite and > 0",
            });
        }
        if true_states.len() != measurements.len() {
            return Err(DynamicsError::DimensionMismatch {
                what: "trajectory: measurements",
                expected: true_states.len(),
                got: measurements.len(),
            });
        }
        if true_states.is_empty() {
            return Err(DynamicsError::DimensionMismatch {
                what: "trajectory: states",
                expected: 1,
                got: 0,
            });
        }
        let times = (1..=true_states.len()).map(|k| k as f64 * ts).collect();
        Ok(Trajectory {
            initial_state,
            ts,
            times,
            true_states,
            measurements,
        })
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.initial_state
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    /// Number of sampled steps (the initial condition is not counted).
    pub fn len(&self) -> usize {
        self.true_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_states.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn true_states(&self) -> &[StateVector] {
        &self.true_states
    }

    pub fn measurements(&self) -> &[DVector<f64>] {
        &self.measurements
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.dim()
    }
}

/// Simulates the plant for `steps` intervals of length `ts`, measuring each
/// sampled state through `model` with i.i.d. zero-mean Gaussian noise drawn
/// from a generator seeded with `seed`. No process noise is injected; the
/// only randomness is the measurement noise. Identical arguments produce a
/// bit-identical trajectory.
pub fn simulate_truth(
    system: &OdeSystem,
    model: &MeasurementModel,
    x0: &StateVector,
    steps: usize,
    ts: f64,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Trajectory, DynamicsError> {
    if steps == 0 {
        return Err(DynamicsError::InvalidConfig("steps must be >= 1".into()));
    }
    if model.state_dim() != system.dim() {
        return Err(DynamicsError::DimensionMismatch {
            what: "simulate_truth: measurement columns",
            expected: system.dim(),
            got: model.state_dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.measurement_dim();
    let noise_dist = if model.sigma_v() > 0.0 {
        Some(Normal::new(0.0, model.sigma_v()).expect("validated sigma"))
    } else {
        None
    };

    let u = ControlInput::empty();
    let mut states = Vec::with_capacity(steps);
    let mut measurements = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        x = integrate_interval(system, &x, &u, ts, cfg)?;
        let noise = match &noise_dist {
            Some(dist) => DVector::from_iterator(m, (0..m).map(|_| dist.sample(&mut rng))),
            None => DVector::zeros(m),
        };
        measurements.push(model.measure(&x, &noise)?);
        states.push(x.clone());
    }
    Trajectory::new(x0.clone(), ts, states, measurements)
}
