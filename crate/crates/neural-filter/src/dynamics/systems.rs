//! The benchmark vector fields.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use super::{ControlInput, DynamicsError, StateVector};

/// A user-supplied vector field, mostly useful for tests and ad-hoc plants.
pub struct CustomOde {
    pub name: String,
    pub dim: usize,
    pub input_dim: usize,
    #[allow(clippy::type_complexity)]
    pub rhs: Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
}

/// A named continuous-time system `dx/dt = f(x, u)` with its parameter set.
///
/// Parameters are validated on construction: everything finite, masses and
/// lengths strictly positive. Unspecified parameters take the conventional
/// defaults (`pendulum`: g = 9.81, l = 1; `van_der_pol`: mu = 1; `lorenz`:
/// sigma = 10, rho = 28, beta = 8/3; `double_pendulum`: unit masses and
/// lengths, g = 9.81).
#[derive(Clone)]
pub enum OdeSystem {
    Pendulum {
        gravity: f64,
        length: f64,
    },
    VanDerPol {
        mu: f64,
    },
    Lorenz {
        sigma: f64,
        rho: f64,
        beta: f64,
    },
    DoublePendulum {
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        gravity: f64,
    },
    Custom(Arc<CustomOde>),
}

fn require_finite(name: &str, value: f64) -> Result<f64, DynamicsError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DynamicsError::InvalidParameter {
            name: name.into(),
            value,
            reason: "must be finite",
        })
    }
}

fn require_positive(name: &str, value: f64) -> Result<f64, DynamicsError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(DynamicsError::InvalidParameter {
            name: name.into(),
            value,
            reason: "must be finite and > 0",
        })
    }
}

impl OdeSystem {
    pub fn pendulum(gravity: f64, length: f64) -> Result<Self, DynamicsError> {
        Ok(OdeSystem::Pendulum {
            gravity: require_finite("g", gravity)?,
            length: require_positive("l", length)?,
        })
    }

    pub fn van_der_pol(mu: f64) -> Result<Self, DynamicsError> {
        Ok(OdeSystem::VanDerPol {
            mu: require_finite("mu", mu)?,
        })
    }

    pub fn lorenz(sigma: f64, rho: f64, beta: f64) -> Result<Self, DynamicsError> {
        Ok(OdeSystem::Lorenz {
            sigma: require_finite("sigma", sigma)?,
            rho: require_finite("rho", rho)?,
            beta: require_finite("beta", beta)?,
        })
    }

    pub fn double_pendulum(
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        gravity: f64,
    ) -> Result<Self, DynamicsError> {
        Ok(OdeSystem::DoublePendulum {
            m1: require_positive("m1", m1)?,
            m2: require_positive("m2", m2)?,
            l1: require_positive("l1", l1)?,
            l2: require_positive("l2", l2)?,
            gravity: require_finite("g", gravity)?,
        })
    }

    /// Builds a system by name with parameter overrides. Parameter names not
    /// defined for the chosen system are rejected.
    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self, DynamicsError> {
        let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
        let allowed: &[&str] = match name {
            "pendulum" => &["g", "l"],
            "van_der_pol" => &["mu"],
            "lorenz" => &["sigma", "rho", "beta"],
            "double_pendulum" => &["m1", "m2", "l1", "l2", "g"],
            _ => {
                return Err(DynamicsError::InvalidParameter {
                    name: format!("system `{name}`"),
                    value: f64::NAN,
                    reason: "unknown system name",
                })
            }
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(DynamicsError::InvalidParameter {
                name: format!("{name}.{bad}"),
                value: params[bad],
                reason: "parameter not defined for this system",
            });
        }
        match name {
            "pendulum" => Self::pendulum(get("g", 9.81), get("l", 1.0)),
            "van_der_pol" => Self::van_der_pol(get("mu", 1.0)),
            "lorenz" => Self::lorenz(get("sigma", 10.0), get("rho", 28.0), get("beta", 8.0 / 3.0)),
            "double_pendulum" => Self::double_pendulum(
                get("m1", 1.0),
                get("m2", 1.0),
                get("l1", 1.0),
                get("l2", 1.0),
                get("g", 9.81),
            ),
            _ => unreachable!(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            OdeSystem::Pendulum { .. } => "pendulum",
            OdeSystem::VanDerPol { .. } => "van_der_pol",
            OdeSystem::Lorenz { .. } => "lorenz",
            OdeSystem::DoublePendulum { .. } => "double_pendulum",
            OdeSystem::Custom(c) => &c.name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            OdeSystem::Pendulum { .. } | OdeSystem::VanDerPol { .. } => 2,
            OdeSystem::Lorenz { .. } => 3,
            OdeSystem::DoublePendulum { .. } => 4,
            OdeSystem::Custom(c) => c.dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            OdeSystem::Custom(c) => c.input_dim,
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            OdeSystem::Pendulum { gravity, length } => vec![("g", gravity), ("l", length)],
            OdeSystem::VanDerPol { mu } => vec![("mu", mu)],
            OdeSystem::Lorenz { sigma, rho, beta } => {
                vec![("sigma", sigma), ("rho", rho), ("beta", beta)]
            }
            OdeSystem::DoublePendulum {
                m1,
                m2,
                l1,
                l2,
                gravity,
            } => vec![("m1", m1), ("m2", m2), ("l1", l1), ("l2", l2), ("g", gravity)],
            OdeSystem::Custom(_) => Vec::new(),
        }
    }

    /// Evaluates `dx/dt` at a validated state and input.
    pub fn eval_rhs(
        &self,
        x: &StateVector,
        u: &ControlInput,
    ) -> Result<StateVector, DynamicsError> {
        let dx = self.derivative(x.as_dvector(), u.as_dvector())?;
        StateVector::from_dvector(dx)
    }

    /// Raw evaluation used by the integrator; checks dimensions and rejects
    /// non-finite states.
    pub(crate) fn derivative(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        if x.len() != self.dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "rhs: state",
                expected: self.dim(),
                got: x.len(),
            });
        }
        if u.len() != self.input_dim() {
            return Err(DynamicsError::DimensionMismatch {
                what: "rhs: input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState { index });
        }
        match *self {
            OdeSystem::Pendulum { gravity, length } => Ok(DVector::from_vec(vec![
                x[1],
                -(gravity / length) * x[0].sin(),
            ])),
            OdeSystem::VanDerPol { mu } => Ok(DVector::from_vec(vec![
                x[1],
                mu * (1.0 - x[0] * x[0]) * x[1] - x[0],
            ])),
            OdeSystem::Lorenz { sigma, rho, beta } => Ok(DVector::from_vec(vec![
                sigma * (x[1] - x[0]),
                x[0] * (rho - x[2]) - x[1],
                x[0] * x[1] - beta * x[2],
            ])),
            OdeSystem::DoublePendulum {
                m1,
                m2,
                l1,
                l2,
                gravity,
            } => double_pendulum_rhs(x, m1, m2, l1, l2, gravity),
            OdeSystem::Custom(ref c) => {
                let dx = (c.rhs)(x.as_slice(), u.as_slice());
                if dx.len() != c.dim {
                    return Err(DynamicsError::DimensionMismatch {
                        what: "rhs: custom output",
                        expected: c.dim,
                        got: dx.len(),
                    });
                }
                Ok(DVector::from_vec(dx))
            }
        }
    }
}

/// State layout `[theta1, theta1_dot, theta2, theta2_dot]`. The angular
/// accelerations come from the 2x2 linear system `M(theta) theta_dd = T - D`
/// solved by direct inversion; `T = 0` since no external torque is applied.
fn double_pendulum_rhs(
    x: &DVector<f64>,
    m1: f64,
    m2: f64,
    l1: f64,
    l2: f64,
    gravity: f64,
) -> Result<DVector<f64>, DynamicsError> {
    let (th1, w1, th2, w2) = (x[0], x[1], x[2], x[3]);
    let phi = th2 - th1;
    let (sin_phi, cos_phi) = phi.sin_cos();

    let m11 = (m1 + m2) * l1 * l1;
    let m12 = m2 * l1 * l2 * cos_phi;
    let m21 = l1 * cos_phi;
    let m22 = l2;

    let d1 = -m2 * l1 * l2 * sin_phi * w2 * w2 + (m1 + m2) * gravity * l1 * th1.sin();
    let d2 = l1 * sin_phi * w1 * w1 + gravity * th2.sin();

    let det = m11 * m22 - m12 * m21;
    if det.abs() < 1e-12 {
        return Err(DynamicsError::DegenerateConfiguration { det });
    }
    // theta_dd = M^{-1} (T - D) with T = 0
    let a1 = (m22 * (-d1) - m12 * (-d2)) / det;
    let a2 = (m11 * (-d2) - m21 * (-d1)) / det;

    Ok(DVector::from_vec(vec![w1, a1, w2, a2]))
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut dbg = f.debug_struct("OdeSystem");
        dbg.field("name", &self.name()).field("dim", &self.dim());
        for (key, value) in self.params() {
            dbg.field(key, &value);
        }
        dbg.finish()
    }
}
