//! State and input vectors for the planar rocket.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of state components.
pub const STATE_DIM: usize = 7;

/// Which rocket variant the dynamics describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Thrust-vector control only: inputs (F, delta).
    Tvc,
    /// TVC plus grid fins: inputs (F, delta, gamma).
    GridFin,
}

impl ModelKind {
    /// Number of input channels for this variant.
    pub fn input_dim(self) -> usize {
        match self {
            ModelKind::Tvc => 2,
            ModelKind::GridFin => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tvc => "tvc",
            ModelKind::GridFin => "gridfin",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Planar rocket state.
///
/// Axes: `x` horizontal with the pad at 0, `y` altitude above the pad with
/// up positive. `theta` is the angle between the rocket centerline and the
/// gravity line. Gravity therefore enters the vertical velocity update as
/// `-g0`, and vertical thrust as `+F cos(theta+delta)/m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocketState {
    /// Total mass [kg].
    pub mass: f64,
    /// Horizontal position [m].
    pub x: f64,
    /// Altitude above the pad [m].
    pub y: f64,
    /// Horizontal velocity [m/s].
    pub vx: f64,
    /// Vertical velocity [m/s], up positive.
    pub vy: f64,
    /// Attitude angle [rad].
    pub theta: f64,
    /// Attitude rate [rad/s].
    pub omega: f64,
}

impl RocketState {
    pub fn new(mass: f64, x: f64, y: f64, vx: f64, vy: f64, theta: f64, omega: f64) -> Self {
        Self {
            mass,
            x,
            y,
            vx,
            vy,
            theta,
            omega,
        }
    }

    /// Component order used everywhere: [m, x, y, vx, vy, theta, omega].
    pub fn to_vector(&self) -> SVector<f64, STATE_DIM> {
        SVector::from([
            self.mass, self.x, self.y, self.vx, self.vy, self.theta, self.omega,
        ])
    }

    pub fn from_vector(v: &SVector<f64, STATE_DIM>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// Checks finiteness and that some propellant remains.
    pub fn validate(&self, dry_mass: f64) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NumericalError {
                context: "rocket state",
            });
        }
        if self.mass <= dry_mass {
            return Err(Error::FuelExhausted {
                mass: self.mass,
                dry_mass,
            });
        }
        Ok(())
    }

    /// Planar distance from the pad origin.
    pub fn distance_to_origin(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Control input applied over one sample interval.
///
/// `fin_coeff` must be present exactly for the grid-fin variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Thrust magnitude F [N], nonnegative.
    pub thrust: f64,
    /// Gimbal angle delta [rad] between thrust vector and centerline.
    pub gimbal: f64,
    /// Grid-fin coefficient gamma, in [0.8, 1] when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fin_coeff: Option<f64>,
}

impl ControlInput {
    /// TVC input (no fin coefficient).
    pub fn tvc(thrust: f64, gimbal: f64) -> Self {
        Self {
            thrust,
            gimbal,
            fin_coeff: None,
        }
    }

    /// Grid-fin input.
    pub fn grid_fin(thrust: f64, gimbal: f64, fin_coeff: f64) -> Self {
        Self {
            thrust,
            gimbal,
            fin_coeff: Some(fin_coeff),
        }
    }

    /// The model variant this input shape belongs to.
    pub fn kind(&self) -> ModelKind {
        if self.fin_coeff.is_some() {
            ModelKind::GridFin
        } else {
            ModelKind::Tvc
        }
    }

    /// Channel values in input order (F, delta[, gamma]).
    pub fn channels(&self) -> Vec<f64> {
        match self.fin_coeff {
            Some(g) => vec![self.thrust, self.gimbal, g],
            None => vec![self.thrust, self.gimbal],
        }
    }

    /// Rebuilds an input from channel values for `kind`.
    pub fn from_channels(kind: ModelKind, u: &[f64]) -> Result<Self> {
        if u.len() != kind.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "expected {} input channels for {kind}, got {}",
                kind.input_dim(),
                u.len()
            )));
        }
        Ok(match kind {
            ModelKind::Tvc => Self::tvc(u[0], u[1]),
            ModelKind::GridFin => Self::grid_fin(u[0], u[1], u[2]),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.thrust.is_finite()
            && self.gimbal.is_finite()
            && self.fin_coeff.map_or(true, f64::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_vector_roundtrip() {
        let s = RocketState::new(2000.0, 165.0, 1000.0, -10.0, -80.0, 0.1, 0.0);
        let v = s.to_vector();
        assert_eq!(RocketState::from_vector(&v), s);
    }

    #[test]
    fn input_kind_tracks_fin_coeff() {
        assert_eq!(ControlInput::tvc(1.0, 0.0).kind(), ModelKind::Tvc);
        assert_eq!(
            ControlInput::grid_fin(1.0, 0.0, 0.9).kind(),
            ModelKind::GridFin
        );
    }

    #[test]
    fn channels_roundtrip() {
        let u = ControlInput::grid_fin(2e4, 0.1, 0.85);
        let back = ControlInput::from_channels(ModelKind::GridFin, &u.channels()).unwrap();
        assert_eq!(u, back);
        assert!(ControlInput::from_channels(ModelKind::Tvc, &u.channels()).is_err());
    }

    #[test]
    fn validate_rejects_exhausted_fuel() {
        let s = RocketState::new(1500.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            s.validate(1500.0),
            Err(crate::error::Error::FuelExhausted { .. })
        ));
    }
}
