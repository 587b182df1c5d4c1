//! Physical constants and the admissible sets for states and inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::state::{ModelKind, RocketState, STATE_DIM};

/// Closed interval used for per-channel bounds. Either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn contains_with_tol(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    /// Finite width, or `f64::INFINITY` for one-sided bounds.
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.lo > self.hi {
            return Err(Error::InvalidArgument(format!(
                "bound `{name}` has lo {} > hi {}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// The admissible input set U.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlBounds {
    pub thrust: Bound,
    pub gimbal: Bound,
    pub fin_coeff: Bound,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            thrust: Bound::new(0.0, 30_000.0),
            gimbal: Bound::new(-0.26, 0.26),
            fin_coeff: Bound::new(0.8, 1.0),
        }
    }
}

impl ControlBounds {
    /// Per-channel bounds in input order for `kind`.
    pub fn channels(&self, kind: ModelKind) -> Vec<Bound> {
        match kind {
            ModelKind::Tvc => vec![self.thrust, self.gimbal],
            ModelKind::GridFin => vec![self.thrust, self.gimbal, self.fin_coeff],
        }
    }

    /// Range used to size slack and noise defaults, per channel.
    pub fn channel_ranges(&self, kind: ModelKind) -> Vec<f64> {
        self.channels(kind).iter().map(Bound::width).collect()
    }

    fn check(&self) -> Result<()> {
        self.thrust.check("thrust")?;
        self.gimbal.check("gimbal")?;
        self.fin_coeff.check("fin_coeff")?;
        if self.thrust.lo < 0.0 {
            return Err(Error::InvalidArgument(
                "thrust lower bound must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// The admissible state set X, plus the terminal goal ball radius.
///
/// Bound choices not fixed by the problem statement: `y.lo` is slightly
/// negative so that noisy touchdown measurements stay feasible, and the
/// attitude box is wide enough for aggressive tilt maneuvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateBounds {
    pub mass: Bound,
    pub x: Bound,
    pub y: Bound,
    pub vx: Bound,
    pub vy: Bound,
    pub theta: Bound,
    pub omega: Bound,
    /// Goal tolerance around the origin [m] used by the receding-horizon
    /// terminal constraint.
    pub terminal_radius: f64,
}

impl Default for StateBounds {
    fn default() -> Self {
        Self {
            mass: Bound::new(1500.0, f64::INFINITY),
            x: Bound::new(-5000.0, 5000.0),
            y: Bound::new(-15.0, 25_000.0),
            vx: Bound::new(-250.0, 250.0),
            vy: Bound::new(-250.0, 250.0),
            theta: Bound::new(-1.2, 1.2),
            omega: Bound::new(-1.0, 1.0),
            terminal_radius: 15.0,
        }
    }
}

impl StateBounds {
    /// Per-component bounds in state order.
    pub fn components(&self) -> [Bound; STATE_DIM] {
        [
            self.mass, self.x, self.y, self.vx, self.vy, self.theta, self.omega,
        ]
    }

    pub fn contains(&self, s: &RocketState, tol: f64) -> bool {
        let v = s.to_vector();
        self.components()
            .iter()
            .zip(v.iter())
            .all(|(b, &c)| b.contains_with_tol(c, tol))
    }

    fn check(&self) -> Result<()> {
        for (b, name) in self
            .components()
            .iter()
            .zip(["mass", "x", "y", "vx", "vy", "theta", "omega"])
        {
            b.check(name)?;
        }
        if self.terminal_radius < 0.0 {
            return Err(Error::InvalidArgument(
                "terminal radius must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Physical constants of the rocket and the sample time.
///
/// The defaults give a thrust-to-weight ratio of about 1.5 at full load and
/// a 500 kg propellant budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Thrust per unit mass-flow K [N·s/kg]; mass-flow is F/K.
    pub k: f64,
    /// Moment of inertia J [kg·m²], constant.
    pub inertia: f64,
    /// Rocket length l [m].
    pub length: f64,
    /// Gravitational acceleration magnitude g0 [m/s²].
    pub g0: f64,
    /// Air density rho [kg/m³].
    pub rho: f64,
    /// Maximum grid-fin area A_g [m²].
    pub fin_area: f64,
    /// Sample time T_s [s].
    pub dt: f64,
    /// Structural mass [kg]; the propellant is `mass - dry_mass`.
    pub dry_mass: f64,
    pub input_bounds: ControlBounds,
    pub state_bounds: StateBounds,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            k: 2000.0,
            inertia: 20_000.0,
            length: 10.0,
            g0: 9.81,
            rho: 1.225,
            fin_area: 2.0,
            dt: 1.0,
            dry_mass: 1500.0,
            input_bounds: ControlBounds::default(),
            state_bounds: StateBounds::default(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.k, "k"),
            (self.inertia, "inertia"),
            (self.length, "length"),
            (self.g0, "g0"),
            (self.dt, "dt"),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` must be positive and finite, got {v}"
                )));
            }
        }
        for (v, name) in [(self.rho, "rho"), (self.fin_area, "fin_area")] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` must be nonnegative and finite, got {v}"
                )));
            }
        }
        if !(self.dry_mass >= 0.0) {
            return Err(Error::InvalidArgument(
                "dry mass must be nonnegative".into(),
            ));
        }
        self.input_bounds.check()?;
        self.state_bounds.check()?;
        Ok(())
    }

    /// Checks an input against the admissible set of its variant.
    pub fn input_in_bounds(&self, u: &crate::model::ControlInput, tol: f64) -> bool {
        let bounds = self.input_bounds.channels(u.kind());
        bounds
            .iter()
            .zip(u.channels())
            .all(|(b, v)| b.contains_with_tol(v, tol))
    }
}
