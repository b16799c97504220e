//! Adam parameter updates over flat slices.

use thiserror::Error;

use super::TrainConfig;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("adam: params/grads/moments length mismatch ({params}/{grads}/{moments})")]
    LengthMismatch {
        params: usize,
        grads: usize,
        moments: usize,
    },
    #[error("adam: step index must be >= 1")]
    BadStepIndex,
    #[error("adam: non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
}

/// First and second moment accumulators for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update at step `t` (1-based):
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, then parameters move by
/// `-lr * m_hat / (sqrt(v_hat) + eps)` with the usual bias corrections.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    cfg: &TrainConfig,
) -> Result<(), AdamError> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(AdamError::LengthMismatch {
            params: params.len(),
            grads: grads.len(),
            moments: state.len(),
        });
    }
    if t == 0 {
        return Err(AdamError::BadStepIndex);
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(AdamError::NonFiniteGradient(i));
    }
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let m_corr = 1.0 - b1.powf(t as f64);
    let v_corr = 1.0 - b2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / m_corr;
        let v_hat = state.v[i] / v_corr;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}
