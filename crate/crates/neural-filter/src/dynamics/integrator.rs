//! Adaptive one-interval integration with the Dormand-Prince 4(5) pair.
//!
//! 7 stages, 6 evaluations per step thanks to FSAL; the embedded 4th order
//! solution drives the local error estimate. The input is held constant
//! across the interval. The step controller is plain floating-point
//! arithmetic with no randomness, so results are reproducible bit for bit.

use nalgebra::DVector;

use super::{ControlInput, DynamicsError, OdeSystem, StateVector};

/// Local-error tolerances and step limits for [`integrate_interval`].
///
/// `initial_step = None` starts at `t_span / 100`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-9,
            abs_tol: 1e-9,
            max_steps: 1_000_000,
            initial_step: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerance(tol: f64) -> Self {
        IntegratorConfig {
            rel_tol: tol,
            abs_tol: tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, v) in [("rel_tol", self.rel_tol), ("abs_tol", self.abs_tol)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DynamicsError::InvalidConfig(format!(
                    "{name} = {v} must lie in (0, 1)"
                )));
            }
        }
        if self.max_steps == 0 {
            return Err(DynamicsError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if let Some(h0) = self.initial_step {
            if !(h0.is_finite() && h0 > 0.0) {
                return Err(DynamicsError::InvalidConfig(format!(
                    "initial_step = {h0} must be finite and > 0"
                )));
            }
        }
        Ok(())
    }
}

// Dormand-Prince 4(5) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order weights coincide with the last A row (FSAL); these are the
// differences b5 - b4 used for the embedded error estimate.
const ERR: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;

/// Integrates `system` from `x0` over `[0, t_span]` with `u` held constant,
/// keeping the local error within `abs_tol + rel_tol * |x|` per component.
pub fn integrate_interval(
    system: &OdeSystem,
    x0: &StateVector,
    u: &ControlInput,
    t_span: f64,
    cfg: &IntegratorConfig,
) -> Result<StateVector, DynamicsError> {
    cfg.validate()?;
    if !(t_span.is_finite() && t_span > 0.0) {
        return Err(DynamicsError::InvalidConfig(format!(
            "t_span = {t_span} must be finite and > 0"
        )));
    }
    let uv = u.as_dvector();
    let n = x0.dim();

    let mut t = 0.0_f64;
    let mut y = x0.as_dvector().clone();
    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(n); 7];
    k[0] = system.derivative(&y, uv)?;

    let mut h = cfg.initial_step.unwrap_or(t_span / 100.0).min(t_span);
    let mut attempts = 0usize;

    while t < t_span {
        attempts += 1;
        if attempts > cfg.max_steps {
            return Err(DynamicsError::StepLimitExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let last = h >= t_span - t;
        if last {
            h = t_span - t;
        }

        for stage in 1..7 {
            let mut arg = y.clone();
            for (j, kj) in k.iter().enumerate().take(stage) {
                if A[stage][j] != 0.0 {
                    arg.axpy(h * A[stage][j], kj, 1.0);
                }
            }
            if arg.iter().any(|v| !v.is_finite()) {
                return Err(DynamicsError::Divergence { t: t + C[stage] * h });
            }
            k[stage] = system.derivative(&arg, uv)?;
        }
        // Stage 7's argument is the 5th-order solution itself.
        let y_new = {
            let mut acc = y.clone();
            for (j, kj) in k.iter().enumerate().take(6) {
                if A[6][j] != 0.0 {
                    acc.axpy(h * A[6][j], kj, 1.0);
                }
            }
            acc
        };
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Divergence { t });
        }
        k[6] = system.derivative(&y_new, uv)?;

        let mut err_sq = 0.0;
        for i in 0..n {
            let e: f64 = (0..7).map(|j| ERR[j] * k[j][i]).sum::<f64>() * h;
            let scale = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            let r = e / scale;
            err_sq += r * r;
        }
        let err_norm = (err_sq / n as f64).sqrt();
        if !err_norm.is_finite() {
            return Err(DynamicsError::Divergence { t });
        }

        if err_norm <= 1.0 {
            t += h;
            y = y_new;
            k.swap(0, 6); // FSAL
            if last {
                break;
            }
        }

        let factor = if err_norm == 0.0 {
            FACTOR_MAX
        } else {
            (SAFETY * err_norm.powf(-0.2)).clamp(FACTOR_MIN, FACTOR_MAX)
        };
        h *= factor;
    }

    StateVector::from_dvector(y)
}
