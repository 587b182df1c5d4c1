//! Domain types, discrete-time dynamics for both rocket variants, analytic
//! Jacobians, noise injection, and trajectory bookkeeping.
//!
//! # Conventions
//!
//! The vertical axis points up and gravity enters the vertical velocity
//! update as `-g0`; with the rocket upright (`theta + delta = 0`) thrust
//! contributes `+F/m`. Aerodynamic drag from the grid fins is modeled
//! sign-aware as `v·|v|` so that it opposes the current velocity; the
//! magnitude matches the quadratic law `gamma·rho·A_g·v²/(2m)`.

mod dynamics;
mod noise;
mod params;
mod state;
mod trajectory;

pub use dynamics::{jacobians, step, step_gridfin, step_tvc};
pub(crate) use dynamics::{step_hessian_weighted, step_jacobian_vector, step_vector};
pub use noise::{NoiseConfig, NoiseSampler};
pub use params::{Bound, ControlBounds, ModelParams, StateBounds};
pub use state::{ControlInput, ModelKind, RocketState, STATE_DIM};
pub use trajectory::{fuel_burned, simulate, Trajectory};
