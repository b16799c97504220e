//! State estimation for neural surrogates of ODE dynamics.
//!
//! Feedforward networks trained on sampled one-step flows make good
//! short-horizon predictors but drift open loop: iterated on their own
//! output their error accumulates without bound. This crate pairs such a
//! surrogate with a measurement-corrected recursion in the style of the
//! extended Kalman filter, using the network's analytic input-Jacobian as
//! the state-transition matrix, which keeps the estimate and its covariance
//! bounded over long horizons.
//!
//! The pieces:
//!
//! - [`dynamics`] — benchmark systems (simple pendulum, Van der Pol, Lorenz,
//!   double pendulum), adaptive one-interval integration, noisy ground-truth
//!   simulation
//! - [`mlp`] — the network: forward evaluation, exact input-Jacobian,
//!   binary serialization
//! - [`training`] — one-step flow datasets and mini-batch Adam training
//! - [`filter`] — the predict/correct recursion and the open-loop baseline
//! - [`experiments`] — config files, the end-to-end runner, CSV emission
//!
//! ```
//! use nalgebra::DVector;
//! use neural_filter::dynamics::{IntegratorConfig, OdeSystem, StateVector, ControlInput};
//! use neural_filter::dynamics::integrate_interval;
//!
//! let system = OdeSystem::pendulum(9.81, 1.0).unwrap();
//! let x0 = StateVector::new(vec![0.5, 0.0]).unwrap();
//! let x1 = integrate_interval(
//!     &system,
//!     &x0,
//!     &ControlInput::empty(),
//!     0.1,
//!     &IntegratorConfig::default(),
//! )
//! .unwrap();
//! assert_eq!(x1.dim(), 2);
//! ```
//!
//! Everything is deterministic per seed: the same configuration produces
//! bit-identical parameters, trajectories, and artifact files.

pub mod dynamics;
pub mod experiments;
pub mod filter;
pub mod mlp;
pub mod training;

pub use dynamics::{
    integrate_interval, simulate_truth, ControlInput, DynamicsError, IntegratorConfig,
    MeasurementModel, OdeSystem, StateVector, Trajectory,
};
pub use filter::{
    open_loop_rollout, predict, run_filter, update, FilterConfig, FilterError, FilterRecord,
    FilterState,
};
pub use mlp::{Activation, JacobianMatrix, LayerSpec, MlpError, MlpModel, ModelIoError};
pub use training::{
    adam_step, generate_dataset, split_dataset, train, AdamState, Dataset, LossTrace, SampleBox,
    TrainConfig, TrainingError,
};
