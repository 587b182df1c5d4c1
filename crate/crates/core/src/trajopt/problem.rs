//! Landing problem definition for the batch (full-horizon) plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams, RocketState};

/// Componentwise window the final state must land inside.
///
/// `pos_tol == 0` pins the final position to the origin exactly (two
/// equality rows in the transcription); a positive value turns it into a
/// box. Velocity, attitude, and rate are always boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminalSpec {
    /// |x_M|, |y_M| <= pos_tol [m]; 0 means exactly the origin.
    pub pos_tol: f64,
    /// |vx_M|, |vy_M| <= v_max [m/s].
    pub v_max: f64,
    /// |theta_M| <= theta_max [rad].
    pub theta_max: f64,
    /// |omega_M| <= omega_max [rad/s].
    pub omega_max: f64,
}

impl Default for TerminalSpec {
    fn default() -> Self {
        Self {
            pos_tol: 0.0,
            v_max: 2.0,
            theta_max: 0.05,
            omega_max: 0.05,
        }
    }
}

impl TerminalSpec {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.pos_tol, "pos_tol"),
            (self.v_max, "v_max"),
            (self.theta_max, "theta_max"),
            (self.omega_max, "omega_max"),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "terminal window `{name}` must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Whether a state satisfies the window (with slack `tol` per side).
    pub fn contains(&self, s: &RocketState, tol: f64) -> bool {
        s.x.abs() <= self.pos_tol + tol
            && s.y.abs() <= self.pos_tol + tol
            && s.vx.abs() <= self.v_max + tol
            && s.vy.abs() <= self.v_max + tol
            && s.theta.abs() <= self.theta_max + tol
            && s.omega.abs() <= self.omega_max + tol
    }
}

/// The fuel-minimal landing problem over a fixed number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandingProblem {
    pub model_kind: ModelKind,
    pub params: ModelParams,
    pub x0: RocketState,
    /// Number of steps M; the plan has M+1 states.
    pub horizon: usize,
    pub terminal: TerminalSpec,
}

impl LandingProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidProblem(
                "landing horizon must be at least 1 step".into(),
            ));
        }
        self.params.validate()?;
        self.terminal.validate()?;
        self.x0.validate(self.params.dry_mass)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_horizon_rejected() {
        let p = LandingProblem {
            model_kind: ModelKind::Tvc,
            params: ModelParams::default(),
            x0: RocketState::new(2000.0, 165.0, 1000.0, -10.0, -80.0, 0.1, 0.0),
            horizon: 0,
            terminal: TerminalSpec::default(),
        };
        assert!(matches!(p.validate(), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn default_window_is_origin_pinned() {
        let t = TerminalSpec::default();
        assert_eq!(t.pos_tol, 0.0);
        let landed = RocketState::new(1800.0, 0.0, 0.0, 0.5, -1.0, 0.01, 0.0);
        assert!(t.contains(&landed, 1e-9));
        let high = RocketState::new(1800.0, 0.0, 30.0, 0.5, -1.0, 0.01, 0.0);
        assert!(!t.contains(&high, 1e-9));
    }
}
