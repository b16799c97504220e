//! Measurement-corrected state estimation around a trained surrogate.
//!
//! The recursion alternates two steps. Prediction pushes the posterior
//! through the network and propagates covariance through its input-Jacobian:
//!
//! ```text
//! x[k+1|k] = NN(x[k|k], u[k])
//! P[k+1|k] = A P[k|k] A' + Q,   A = dNN/dx at (x[k|k], u[k])
//! ```
//!
//! Correction folds in the measurement `y[k+1]` through the gain
//! `K = P C' (C P C' + R)^-1`:
//!
//! ```text
//! x[k+1|k+1] = x[k+1|k] + K (y[k+1] - C x[k+1|k])
//! P[k+1|k+1] = (I - K C) P[k+1|k]
//! ```
//!
//! The innovation system is solved through a symmetric positive-definite
//! factorization rather than an explicit inverse, and covariances are
//! resymmetrized after every step. The measurement map is linear in every
//! shipped experiment, so evaluating `C` at the prior versus the posterior
//! makes no difference here; the code uses the prior.
//!
//! [`open_loop_rollout`] is the no-correction baseline: the network iterates
//! on its own output and the covariance recursion runs with zero gain, which
//! is what makes its trace curve diverge while the corrected one stays flat.
//!
//! One recursion is inherently sequential; distinct trajectories can be
//! filtered concurrently since nothing here is shared.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{ControlInput, MeasurementModel, StateVector, Trajectory};
use crate::mlp::{MlpError, MlpModel};

const SYMMETRY_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = -1e-10;
const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("covariance is not symmetric positive semidefinite: {0}")]
    NotPsd(String),
    #[error("network output is not finite")]
    NonFinitePrediction,
    #[error("innovation covariance is numerically singular (condition ~ {cond:e})")]
    SingularInnovation { cond: f64 },
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<FilterError>,
    },
}

fn resymmetrize(p: &mut DMatrix<f64>) {
    let pt = p.transpose();
    *p += pt;
    *p *= 0.5;
}

fn check_psd(name: &str, p: &DMatrix<f64>) -> Result<(), FilterError> {
    if !p.is_square() {
        return Err(FilterError::NotPsd(format!("{name} is not square")));
    }
    let max_asym = (p - p.transpose()).abs().max();
    if max_asym > SYMMETRY_TOL {
        return Err(FilterError::NotPsd(format!(
            "{name} asymmetry {max_asym:e} exceeds {SYMMETRY_TOL:e}"
        )));
    }
    let eigs = p.clone().symmetric_eigen().eigenvalues;
    let min_eig = eigs.min();
    if min_eig < EIGEN_TOL {
        return Err(FilterError::NotPsd(format!(
            "{name} minimum eigenvalue {min_eig:e}"
        )));
    }
    Ok(())
}

/// Posterior estimate and covariance after step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub step: usize,
}

impl FilterState {
    /// Validated constructor: finite estimate, symmetric PSD covariance.
    pub fn new(x_hat: DVector<f64>, p: DMatrix<f64>, step: usize) -> Result<Self, FilterError> {
        if x_hat.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinitePrediction);
        }
        if p.nrows() != x_hat.len() {
            return Err(FilterError::DimensionMismatch {
                what: "filter state covariance",
                expected: x_hat.len(),
                got: p.nrows(),
            });
        }
        check_psd("P", &p)?;
        Ok(FilterState { x_hat, p, step })
    }

    pub fn dim(&self) -> usize {
        self.x_hat.len()
    }
}

/// Fixed quantities of one estimation run: process covariance `Q`, the
/// measurement model (supplying `C` and `R`), and the initial pair
/// `(x0_hat, P0)`.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub q: DMatrix<f64>,
    pub measurement: MeasurementModel,
    pub p0: DMatrix<f64>,
    pub x0_hat: DVector<f64>,
}

impl FilterConfig {
    pub fn new(
        q: DMatrix<f64>,
        measurement: MeasurementModel,
        p0: DMatrix<f64>,
        x0_hat: DVector<f64>,
    ) -> Result<Self, FilterError> {
        let n = measurement.state_dim();
        for (name, m) in [("Q", &q), ("P0", &p0)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(FilterError::DimensionMismatch {
                    what: "filter covariance size",
                    expected: n,
                    got: m.nrows(),
                });
            }
            check_psd(name, m)?;
        }
        if x0_hat.len() != n {
            return Err(FilterError::DimensionMismatch {
                what: "initial estimate",
                expected: n,
                got: x0_hat.len(),
            });
        }
        if x0_hat.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFinitePrediction);
        }
        Ok(FilterConfig {
            q,
            measurement,
            p0,
            x0_hat,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.measurement.state_dim()
    }

    fn initial_state(&self) -> FilterState {
        FilterState {
            x_hat: self.x0_hat.clone(),
            p: self.p0.clone(),
            step: 0,
        }
    }
}

/// Per-step record of one estimation run. For the open-loop baseline the
/// prior and posterior coincide and every gain is zero. `divergence_step` is
/// set when a rollout left the finite range; the vectors then hold only the
/// finite prefix.
#[derive(Debug, Clone)]
pub struct FilterRecord {
    pub priors: Vec<DVector<f64>>,
    pub posteriors: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub covariance_traces: Vec<f64>,
    pub error_norms: Option<Vec<f64>>,
    pub divergence_step: Option<usize>,
}

impl FilterRecord {
    fn with_capacity(steps: usize, with_errors: bool) -> Self {
        FilterRecord {
            priors: Vec::with_capacity(steps),
            posteriors: Vec::with_capacity(steps),
            gains: Vec::with_capacity(steps),
            covariance_traces: Vec::with_capacity(steps),
            error_norms: with_errors.then(|| Vec::with_capacity(steps)),
            divergence_step: None,
        }
    }

    pub fn len(&self) -> usize {
        self.posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriors.is_empty()
    }
}

/// Network input for one transition: the state estimate, with any exogenous
/// input appended.
fn stack_input(x_hat: &DVector<f64>, u: &ControlInput) -> DVector<f64> {
    if u.is_empty() {
        x_hat.clone()
    } else {
        let mut v = DVector::zeros(x_hat.len() + u.dim());
        v.rows_mut(0, x_hat.len()).copy_from(x_hat);
        v.rows_mut(x_hat.len(), u.dim()).copy_from(u.as_dvector());
        v
    }
}

/// Prediction step: returns the prior estimate and prior covariance.
pub fn predict(
    model: &MlpModel,
    state: &FilterState,
    u: &ControlInput,
    cfg: &FilterConfig,
) -> Result<(DVector<f64>, DMatrix<f64>), FilterError> {
    let n = cfg.state_dim();
    if state.dim() != n {
        return Err(FilterError::DimensionMismatch {
            what: "predict: state",
            expected: n,
            got: state.dim(),
        });
    }
    let input = stack_input(&state.x_hat, u);
    let prior = model.forward(&input)?;
    if prior.len() != n {
        return Err(FilterError::DimensionMismatch {
            what: "predict: network output",
            expected: n,
            got: prior.len(),
        });
    }
    if prior.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinitePrediction);
    }
    // State-transition Jacobian: the state block of the network Jacobian.
    let jac = model.input_jacobian(&input)?;
    let a = jac.columns(0, n).into_owned();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinitePrediction);
    }
    let mut p_prior = &a * &state.p * a.transpose() + &cfg.q;
    resymmetrize(&mut p_prior);
    Ok((prior, p_prior))
}

/// Correction step: folds measurement `y` into the prior, producing the
/// posterior state (tagged with `step`) and the gain used.
pub fn update(
    prior: &DVector<f64>,
    p_prior: &DMatrix<f64>,
    y: &DVector<f64>,
    step: usize,
    cfg: &FilterConfig,
) -> Result<(FilterState, DMatrix<f64>), FilterError> {
    let n = cfg.state_dim();
    let m = cfg.measurement.measurement_dim();
    if prior.len() != n {
        return Err(FilterError::DimensionMismatch {
            what: "update: prior",
            expected: n,
            got: prior.len(),
        });
    }
    if y.len() != m {
        return Err(FilterError::DimensionMismatch {
            what: "update: measurement",
            expected: m,
            got: y.len(),
        });
    }
    let c = cfg.measurement.jacobian(prior);
    let r = cfg.measurement.r_matrix();

    let mut s = c * p_prior * c.transpose() + r;
    resymmetrize(&mut s);
    let eigs = s.clone().symmetric_eigen().eigenvalues;
    let (min_eig, max_eig) = (eigs.min(), eigs.max());
    let cond = if min_eig > 0.0 {
        max_eig / min_eig
    } else {
        f64::INFINITY
    };
    // The comparison is NaN-safe: a non-finite eigenvalue must also fail.
    if !min_eig.is_finite() || min_eig <= 0.0 || cond > CONDITION_LIMIT {
        return Err(FilterError::SingularInnovation { cond });
    }
    let chol = s
        .cholesky()
        .ok_or(FilterError::SingularInnovation { cond })?;
    // K = P C' S^-1, computed as the solve S K' = C P.
    let gain = chol.solve(&(c * p_prior)).transpose();

    let innovation = y - c * prior;
    let x_post = prior + &gain * innovation;
    let mut p_post = (DMatrix::identity(n, n) - &gain * c) * p_prior;
    resymmetrize(&mut p_post);

    Ok((
        FilterState {
            x_hat: x_post,
            p: p_post,
            step,
        },
        gain,
    ))
}

/// Runs the full predict/correct recursion over a measured trajectory,
/// starting from `(x0_hat, P0)`. Errors are annotated with the step at which
/// they occurred.
pub fn run_filter(
    model: &MlpModel,
    traj: &Trajectory,
    cfg: &FilterConfig,
) -> Result<FilterRecord, FilterError> {
    if traj.is_empty() {
        return Err(FilterError::InvalidConfig("trajectory is empty".into()));
    }
    if traj.state_dim() != cfg.state_dim() {
        return Err(FilterError::DimensionMismatch {
            what: "run_filter: trajectory dimension",
            expected: cfg.state_dim(),
            got: traj.state_dim(),
        });
    }
    let at_step = |step: usize| move |e: FilterError| FilterError::AtStep {
        step,
        source: Box::new(e),
    };

    let u = ControlInput::empty();
    let mut record = FilterRecord::with_capacity(traj.len(), true);
    let mut state = cfg.initial_state();
    for k in 1..=traj.len() {
        let (prior, p_prior) = predict(model, &state, &u, cfg).map_err(at_step(k))?;
        let y = &traj.measurements()[k - 1];
        let (posterior, gain) = update(&prior, &p_prior, y, k, cfg).map_err(at_step(k))?;

        let truth = &traj.true_states()[k - 1];
        record
            .error_norms
            .as_mut()
            .expect("enabled")
            .push((truth.as_dvector() - &posterior.x_hat).norm());
        record.priors.push(prior);
        record.posteriors.push(posterior.x_hat.clone());
        record.gains.push(gain);
        record.covariance_traces.push(posterior.p.trace());
        state = posterior;
    }
    Ok(record)
}

/// Iterates the network on its own output from `x0` for `steps` transitions,
/// with the covariance recursion running gain-free (`P <- A P A' + Q` from
/// `P0`). When the state or covariance leaves the finite range the rollout
/// stops and the step index is recorded; the finite prefix is returned.
pub fn open_loop_rollout(
    model: &MlpModel,
    x0: &StateVector,
    steps: usize,
    cfg: &FilterConfig,
    truth: Option<&Trajectory>,
) -> Result<FilterRecord, FilterError> {
    if steps == 0 {
        return Err(FilterError::InvalidConfig("steps must be >= 1".into()));
    }
    let n = cfg.state_dim();
    if x0.dim() != n {
        return Err(FilterError::DimensionMismatch {
            what: "rollout: initial state",
            expected: n,
            got: x0.dim(),
        });
    }
    if let Some(t) = truth {
        if t.len() < steps {
            return Err(FilterError::DimensionMismatch {
                what: "rollout: truth length",
                expected: steps,
                got: t.len(),
            });
        }
    }
    let m = cfg.measurement.measurement_dim();
    let u = ControlInput::empty();
    let mut record = FilterRecord::with_capacity(steps, truth.is_some());
    let mut x = x0.as_dvector().clone();
    let mut p = cfg.p0.clone();
    for k in 1..=steps {
        let input = stack_input(&x, &u);
        let next = model.forward(&input)?;
        let jac = model.input_jacobian(&input)?;
        let a = jac.columns(0, n).into_owned();
        let mut p_next = &a * &p * a.transpose() + &cfg.q;
        resymmetrize(&mut p_next);

        let finite = next.iter().all(|v| v.is_finite()) && p_next.iter().all(|v| v.is_finite());
        if !finite {
            record.divergence_step = Some(k);
            break;
        }
        x = next;
        p = p_next;

        if let Some(t) = truth {
            record
                .error_norms
                .as_mut()
                .expect("enabled")
                .push((t.true_states()[k - 1].as_dvector() - &x).norm());
        }
        record.priors.push(x.clone());
        record.posteriors.push(x.clone());
        record.gains.push(DMatrix::zeros(n, m));
        record.covariance_traces.push(p.trace());
    }
    Ok(record)
}
