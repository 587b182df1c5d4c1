//! Fuel-optimal rocket landing trajectories and demonstration following.
//!
//! The crate has four layers:
//!
//! - [`model`]: planar rocket dynamics for two variants (thrust-vector
//!   control only, and TVC plus grid-fin drag), Jacobians, seeded noise,
//!   and trajectory CSV I/O.
//! - [`trajopt`]: direct transcription of the fuel-minimal landing problem
//!   into a constrained NLP and an interior-point solver for it; produces
//!   the demonstration trajectory.
//! - [`toped`]: the receding-horizon demonstration follower with weighted
//!   tracking costs and slack-escalation recovery from infeasibility.
//! - [`harness`]: scenario definitions, a proportional baseline controller,
//!   and the seeded experiments that emit results as CSV/JSON artifacts.

pub mod error;
pub mod harness;
pub mod model;
pub mod toped;
pub mod trajopt;

pub use error::{Error, Result};
pub use model::{
    fuel_burned, jacobians, simulate, step, step_gridfin, step_tvc, Bound, ControlBounds,
    ControlInput, ModelKind, ModelParams, NoiseConfig, RocketState, StateBounds, Trajectory,
    STATE_DIM,
};
