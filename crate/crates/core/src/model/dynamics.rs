//! Discrete-time dynamics for both rocket variants.
//!
//! Both models advance with one explicit forward-Euler step of length `dt`:
//!
//! ```text
//! m'     = m - dt·F/K
//! x'     = x + dt·vx
//! y'     = y + dt·vy
//! vx'    = vx + dt·( -F·sin(th+d)/m            [- dt·gam·rho·A·vx|vx|/(2m)] )
//! vy'    = vy + dt·( -g0 + F·cos(th+d)/m       [- dt·gam·rho·A·vy|vy|/(2m)] )
//! th'    = th + dt·om
//! om'    = om + dt·( -F·l·sin(d)/(2J) )
//! ```
//!
//! The bracketed drag terms exist only in the grid-fin variant. Drag is
//! implemented sign-aware (`v·|v|`) so it always opposes motion; with the
//! y-up convention a descending rocket is decelerated by it.

use nalgebra::{DMatrix, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::model::params::ModelParams;
use crate::model::state::{ControlInput, ModelKind, RocketState, STATE_DIM};

/// sign(v) that treats exactly zero as zero.
fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Raw Euler step on stacked values; no fuel or bounds checks.
///
/// `u` holds (F, delta) for TVC and (F, delta, gamma) for grid fin. Used
/// directly by the transcription, where feasibility is enforced through
/// constraints rather than errors.
pub(crate) fn step_vector(
    kind: ModelKind,
    z: &SVector<f64, STATE_DIM>,
    u: &[f64],
    p: &ModelParams,
) -> SVector<f64, STATE_DIM> {
    let (m, x, y, vx, vy, theta, omega) = (z[0], z[1], z[2], z[3], z[4], z[5], z[6]);
    let (thrust, gimbal) = (u[0], u[1]);
    let h = p.dt;
    let s = (theta + gimbal).sin();
    let c = (theta + gimbal).cos();

    let mut ax = -thrust * s / m;
    let mut ay = -p.g0 + thrust * c / m;
    if kind == ModelKind::GridFin {
        let q = u[2] * p.rho * p.fin_area / (2.0 * m);
        ax -= q * vx * vx.abs();
        ay -= q * vy * vy.abs();
    }

    SVector::from([
        m - h * thrust / p.k,
        x + h * vx,
        y + h * vy,
        vx + h * ax,
        vy + h * ay,
        theta + h * omega,
        omega + h * (-thrust * p.length * gimbal.sin() / (2.0 * p.inertia)),
    ])
}

/// Analytic Jacobians of the raw step: `A = d step/d z` (7x7) and
/// `B = d step/d u` (7 x n_u).
pub(crate) fn step_jacobian_vector(
    kind: ModelKind,
    z: &SVector<f64, STATE_DIM>,
    u: &[f64],
    p: &ModelParams,
) -> (SMatrix<f64, STATE_DIM, STATE_DIM>, DMatrix<f64>) {
    let (m, vx, vy, theta) = (z[0], z[3], z[4], z[5]);
    let (thrust, gimbal) = (u[0], u[1]);
    let h = p.dt;
    let s = (theta + gimbal).sin();
    let c = (theta + gimbal).cos();

    let mut a = SMatrix::<f64, STATE_DIM, STATE_DIM>::identity();
    let mut b = DMatrix::<f64>::zeros(STATE_DIM, kind.input_dim());

    // Mass row.
    b[(0, 0)] = -h / p.k;

    // Kinematics rows.
    a[(1, 3)] = h;
    a[(2, 4)] = h;
    a[(5, 6)] = h;

    // vx row: f3 = -F s/m (+ drag).
    a[(3, 0)] = h * thrust * s / (m * m);
    a[(3, 5)] = -h * thrust * c / m;
    b[(3, 0)] = -h * s / m;
    b[(3, 1)] = -h * thrust * c / m;

    // vy row: f4 = -g0 + F c/m (+ drag).
    a[(4, 0)] = -h * thrust * c / (m * m);
    a[(4, 5)] = -h * thrust * s / m;
    b[(4, 0)] = h * c / m;
    b[(4, 1)] = -h * thrust * s / m;

    // omega row: f6 = -F l sin(d)/(2J).
    b[(6, 0)] = -h * p.length * gimbal.sin() / (2.0 * p.inertia);
    b[(6, 1)] = -h * thrust * p.length * gimbal.cos() / (2.0 * p.inertia);

    if kind == ModelKind::GridFin {
        let gamma = u[2];
        let pa = p.rho * p.fin_area / 2.0;
        // d/dvx of -gam·pa·vx|vx|/m is -2·gam·pa·|vx|/m, and analogously vy.
        a[(3, 3)] -= h * 2.0 * gamma * pa * vx.abs() / m;
        a[(4, 4)] -= h * 2.0 * gamma * pa * vy.abs() / m;
        a[(3, 0)] += h * gamma * pa * vx * vx.abs() / (m * m);
        a[(4, 0)] += h * gamma * pa * vy * vy.abs() / (m * m);
        b[(3, 2)] = -h * pa * vx * vx.abs() / m;
        b[(4, 2)] = -h * pa * vy * vy.abs() / m;
    }

    (a, b)
}

/// Accumulates `sum_r w[r] * Hess(step_r)` over the local variables
/// `[z(7); u(n_u)]` into `out` (must be `(7+n_u) x (7+n_u)`, pre-zeroed or
/// accumulated into). Only the velocity and attitude-rate rows carry
/// curvature; everything else is linear.
pub(crate) fn step_hessian_weighted(
    kind: ModelKind,
    z: &SVector<f64, STATE_DIM>,
    u: &[f64],
    p: &ModelParams,
    w: &SVector<f64, STATE_DIM>,
    out: &mut DMatrix<f64>,
) {
    let (m, vx, vy, theta) = (z[0], z[3], z[4], z[5]);
    let (thrust, gimbal) = (u[0], u[1]);
    let h = p.dt;
    let s = (theta + gimbal).sin();
    let c = (theta + gimbal).cos();
    let m2 = m * m;
    let m3 = m2 * m;

    // Local indices: 0..6 state, 7 = F, 8 = delta, 9 = gamma.
    const IM: usize = 0;
    const IVX: usize = 3;
    const IVY: usize = 4;
    const ITH: usize = 5;
    const IF: usize = 7;
    const ID: usize = 8;
    const IG: usize = 9;

    let mut add = |i: usize, j: usize, v: f64| {
        out[(i, j)] += v;
        if i != j {
            out[(j, i)] += v;
        }
    };

    // f3 = -F s/m, weighted by w3 = h*w[3].
    let w3 = h * w[3];
    if w3 != 0.0 {
        add(IM, IM, w3 * (-2.0 * thrust * s / m3));
        add(IM, ITH, w3 * (thrust * c / m2));
        add(IM, ID, w3 * (thrust * c / m2));
        add(IM, IF, w3 * (s / m2));
        add(ITH, ITH, w3 * (thrust * s / m));
        add(ITH, ID, w3 * (thrust * s / m));
        add(ID, ID, w3 * (thrust * s / m));
        add(ITH, IF, w3 * (-c / m));
        add(ID, IF, w3 * (-c / m));
    }

    // f4 = -g0 + F c/m, weighted by w4 = h*w[4].
    let w4 = h * w[4];
    if w4 != 0.0 {
        add(IM, IM, w4 * (2.0 * thrust * c / m3));
        add(IM, ITH, w4 * (thrust * s / m2));
        add(IM, ID, w4 * (thrust * s / m2));
        add(IM, IF, w4 * (-c / m2));
        add(ITH, ITH, w4 * (-thrust * c / m));
        add(ITH, ID, w4 * (-thrust * c / m));
        add(ID, ID, w4 * (-thrust * c / m));
        add(ITH, IF, w4 * (-s / m));
        add(ID, IF, w4 * (-s / m));
    }

    // f6 = -F l sin(d)/(2J), weighted by w6 = h*w[6].
    let w6 = h * w[6];
    if w6 != 0.0 {
        let lj = p.length / (2.0 * p.inertia);
        add(ID, ID, w6 * (thrust * lj * gimbal.sin()));
        add(ID, IF, w6 * (-lj * gimbal.cos()));
    }

    // Grid-fin drag curvature on the velocity rows.
    if kind == ModelKind::GridFin {
        let gamma = u[2];
        let pa = p.rho * p.fin_area / 2.0;
        for (iv, v, wr) in [(IVX, vx, w3), (IVY, vy, w4)] {
            if wr == 0.0 {
                continue;
            }
            let vav = v * v.abs();
            add(iv, iv, wr * (-2.0 * gamma * pa * signum0(v) / m));
            add(iv, IM, wr * (2.0 * gamma * pa * v.abs() / m2));
            add(iv, IG, wr * (-2.0 * pa * v.abs() / m));
            add(IM, IM, wr * (-2.0 * gamma * pa * vav / m3));
            add(IM, IG, wr * (pa * vav / m2));
        }
    }
}

fn finish_step(
    next: SVector<f64, STATE_DIM>,
    p: &ModelParams,
) -> Result<RocketState> {
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalError {
            context: "dynamics step",
        });
    }
    if next[0] <= p.dry_mass {
        return Err(Error::FuelExhausted {
            mass: next[0],
            dry_mass: p.dry_mass,
        });
    }
    Ok(RocketState::from_vector(&next))
}

/// One Euler step of the TVC-only model.
pub fn step_tvc(state: &RocketState, input: &ControlInput, params: &ModelParams) -> Result<RocketState> {
    if input.fin_coeff.is_some() {
        return Err(Error::InvalidArgument(
            "TVC step received an input with a fin coefficient".into(),
        ));
    }
    state.validate(params.dry_mass)?;
    let next = step_vector(ModelKind::Tvc, &state.to_vector(), &input.channels(), params);
    finish_step(next, params)
}

/// One Euler step of the grid-fin model.
pub fn step_gridfin(
    state: &RocketState,
    input: &ControlInput,
    params: &ModelParams,
) -> Result<RocketState> {
    let gamma = input.fin_coeff.ok_or_else(|| {
        Error::InvalidArgument("grid-fin step requires a fin coefficient".into())
    })?;
    if !params.input_bounds.fin_coeff.contains(gamma) {
        return Err(Error::BoundsViolation(format!(
            "fin coefficient {gamma} outside [{}, {}]",
            params.input_bounds.fin_coeff.lo, params.input_bounds.fin_coeff.hi
        )));
    }
    state.validate(params.dry_mass)?;
    let next = step_vector(
        ModelKind::GridFin,
        &state.to_vector(),
        &input.channels(),
        params,
    );
    finish_step(next, params)
}

/// One Euler step of the given model variant.
pub fn step(
    kind: ModelKind,
    state: &RocketState,
    input: &ControlInput,
    params: &ModelParams,
) -> Result<RocketState> {
    match kind {
        ModelKind::Tvc => step_tvc(state, input, params),
        ModelKind::GridFin => step_gridfin(state, input, params),
    }
}

/// Analytic Jacobians of one step: `A = d step/d state` (7x7) and
/// `B = d step/d input` (7 x n_u), evaluated at `(state, input)`.
pub fn jacobians(
    kind: ModelKind,
    state: &RocketState,
    input: &ControlInput,
    params: &ModelParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if state.mass <= 0.0 {
        return Err(Error::NumericalError {
            context: "jacobians: nonpositive mass",
        });
    }
    let u = input.channels();
    if u.len() != kind.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "input has {} channels but {kind} expects {}",
            u.len(),
            kind.input_dim()
        )));
    }
    let (a, b) = step_jacobian_vector(kind, &state.to_vector(), &u, params);
    let mut a_dyn = DMatrix::zeros(STATE_DIM, STATE_DIM);
    a_dyn.copy_from(&a);
    Ok((a_dyn, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn nominal() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn zero_thrust_is_ballistic() {
        // Only gravity and kinematics act; mass and omega stay put.
        let s = RocketState::new(2000.0, 100.0, 500.0, -10.0, -50.0, 0.0, 0.0);
        let next = step_tvc(&s, &ControlInput::tvc(0.0, 0.0), &nominal()).unwrap();
        assert_eq!(next.mass, 2000.0);
        assert_eq!(next.x, 90.0);
        assert_eq!(next.y, 450.0);
        assert_eq!(next.vx, -10.0);
        assert_eq!(next.vy, -59.81);
        assert_eq!(next.theta, 0.0);
        assert_eq!(next.omega, 0.0);
    }

    #[test]
    fn zero_gimbal_produces_no_torque() {
        let s = RocketState::new(2000.0, 0.0, 800.0, 0.0, -40.0, 0.2, 0.05);
        let next = step_tvc(&s, &ControlInput::tvc(25_000.0, 0.0), &nominal()).unwrap();
        assert_eq!(next.omega, s.omega);
    }

    // Golden full-step values, hand-evaluated line by line with a scalar
    // calculator at the nominal parameters.
    #[test]
    fn golden_tvc_step() {
        let s = RocketState::new(2000.0, 100.0, 500.0, -10.0, -50.0, 0.05, 0.01);
        let next = step_tvc(&s, &ControlInput::tvc(20_000.0, 0.1), &nominal()).unwrap();
        let expected = [
            1990.0,
            90.0,
            450.0,
            -11.494381324735993,
            -49.92228922063958,
            0.060000000000000005,
            -0.48916708323414076,
        ];
        for (got, want) in next.to_vector().iter().zip(expected) {
            assert_relative_eq!(got, &want, max_relative = 1e-12);
        }
    }

    #[test]
    fn golden_gridfin_step() {
        let s = RocketState::new(2000.0, 100.0, 500.0, -10.0, -80.0, 0.05, 0.01);
        let next = step_gridfin(&s, &ControlInput::grid_fin(20_000.0, 0.1, 1.0), &nominal()).unwrap();
        let expected = [
            1990.0,
            90.0,
            420.0,
            -11.433131324735992,
            -76.00228922063958,
            0.060000000000000005,
            -0.48916708323414076,
        ];
        for (got, want) in next.to_vector().iter().zip(expected) {
            assert_relative_eq!(got, &want, max_relative = 1e-12);
        }
        // The descending-drag contribution is gam·rho·A·vy²/(2m)·dt upward.
        let ballistic = step_gridfin(
            &RocketState::new(2000.0, 100.0, 500.0, -10.0, -80.0, 0.05, 0.01),
            &ControlInput::grid_fin(20_000.0, 0.1, 0.0),
            &ModelParams {
                input_bounds: crate::model::ControlBounds {
                    fin_coeff: crate::model::Bound::new(0.0, 1.0),
                    ..Default::default()
                },
                ..nominal()
            },
        )
        .unwrap();
        assert_relative_eq!(next.vy - ballistic.vy, 3.92, max_relative = 1e-12);
    }

    #[test]
    fn gridfin_equals_tvc_at_rest() {
        // Drag vanishes at zero velocity.
        let s = RocketState::new(1900.0, 30.0, 200.0, 0.0, 0.0, 0.08, -0.02);
        let gf = step_gridfin(&s, &ControlInput::grid_fin(18_000.0, -0.05, 0.9), &nominal()).unwrap();
        let tvc = step_tvc(&s, &ControlInput::tvc(18_000.0, -0.05), &nominal()).unwrap();
        for (a, b) in gf.to_vector().iter().zip(tvc.to_vector().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gamma_out_of_bounds_rejected() {
        let s = RocketState::new(2000.0, 0.0, 100.0, 0.0, -10.0, 0.0, 0.0);
        let err = step_gridfin(&s, &ControlInput::grid_fin(1e4, 0.0, 0.5), &nominal());
        assert!(matches!(err, Err(Error::BoundsViolation(_))));
    }

    #[test]
    fn fuel_exhaustion_is_an_error() {
        let s = RocketState::new(1500.5, 0.0, 100.0, 0.0, -10.0, 0.0, 0.0);
        let err = step_tvc(&s, &ControlInput::tvc(30_000.0, 0.0), &nominal());
        assert!(matches!(err, Err(Error::FuelExhausted { .. })));
    }

    #[test]
    fn jacobian_trivial_entries() {
        // Kinematics rows of A and the mass row of B are fixed by the layout.
        let s = RocketState::new(2000.0, 10.0, 400.0, -5.0, -40.0, 0.1, 0.02);
        let u = ControlInput::tvc(0.0, 0.1);
        let (a, b) = jacobians(ModelKind::Tvc, &s, &u, &nominal()).unwrap();
        let h = nominal().dt;
        assert_eq!(a[(1, 1)], 1.0);
        assert_eq!(a[(1, 3)], h);
        assert_eq!(a[(2, 4)], h);
        assert_eq!(b[(0, 0)], -h / nominal().k);
        // With F = 0, the gimbal column only acts through the sin/cos terms,
        // all of which carry a factor F; so it is exactly zero.
        for r in 0..STATE_DIM {
            assert_eq!(b[(r, 1)], 0.0, "row {r}");
        }
    }

    fn finite_diff_jacobians(
        kind: ModelKind,
        z: &SVector<f64, STATE_DIM>,
        u: &[f64],
        p: &ModelParams,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n_u = u.len();
        let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut b = DMatrix::zeros(STATE_DIM, n_u);
        for j in 0..STATE_DIM {
            let h = 1e-6 * z[j].abs().max(1.0);
            let mut zp = *z;
            let mut zm = *z;
            zp[j] += h;
            zm[j] -= h;
            let d = (step_vector(kind, &zp, u, p) - step_vector(kind, &zm, u, p)) / (2.0 * h);
            for i in 0..STATE_DIM {
                a[(i, j)] = d[i];
            }
        }
        for j in 0..n_u {
            let h = 1e-6 * u[j].abs().max(1.0);
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[j] += h;
            um[j] -= h;
            let d = (step_vector(kind, z, &up, p) - step_vector(kind, z, &um, p)) / (2.0 * h);
            for i in 0..STATE_DIM {
                b[(i, j)] = d[i];
            }
        }
        (a, b)
    }

    #[test]
    fn jacobians_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let p = nominal();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for kind in [ModelKind::Tvc, ModelKind::GridFin] {
            for _ in 0..120 {
                let z = SVector::<f64, STATE_DIM>::from([
                    rng.random_range(1600.0..2400.0),
                    rng.random_range(-1000.0..1000.0),
                    rng.random_range(0.0..1500.0),
                    rng.random_range(-120.0..120.0),
                    rng.random_range(-120.0..120.0),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.4..0.4),
                ]);
                let mut u = vec![
                    rng.random_range(0.0..30_000.0),
                    rng.random_range(-0.26..0.26),
                ];
                if kind == ModelKind::GridFin {
                    u.push(rng.random_range(0.8..1.0));
                }
                let (a_an, b_an) = step_jacobian_vector(kind, &z, &u, &p);
                let (a_fd, b_fd) = finite_diff_jacobians(kind, &z, &u, &p);
                for i in 0..STATE_DIM {
                    for j in 0..STATE_DIM {
                        let rel = (a_an[(i, j)] - a_fd[(i, j)]).abs()
                            / a_an[(i, j)].abs().max(1.0);
                        assert!(rel <= 1e-5, "{kind} A[{i},{j}] rel err {rel}");
                    }
                    for j in 0..u.len() {
                        let rel = (b_an[(i, j)] - b_fd[(i, j)]).abs()
                            / b_an[(i, j)].abs().max(1.0);
                        assert!(rel <= 1e-5, "{kind} B[{i},{j}] rel err {rel}");
                    }
                }
            }
        }
    }

    #[test]
    fn weighted_hessian_matches_finite_differences_of_jacobian() {
        use rand::{Rng, SeedableRng};
        let p = nominal();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for kind in [ModelKind::Tvc, ModelKind::GridFin] {
            let n_u = kind.input_dim();
            let n = STATE_DIM + n_u;
            for _ in 0..40 {
                let z = SVector::<f64, STATE_DIM>::from([
                    rng.random_range(1700.0..2300.0),
                    rng.random_range(-500.0..500.0),
                    rng.random_range(10.0..1200.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.3..0.3),
                ]);
                let mut u = vec![
                    rng.random_range(1000.0..29_000.0),
                    rng.random_range(-0.25..0.25),
                ];
                if kind == ModelKind::GridFin {
                    u.push(rng.random_range(0.8..1.0));
                }
                let w = SVector::<f64, STATE_DIM>::from([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]);

                let mut hess = DMatrix::zeros(n, n);
                step_hessian_weighted(kind, &z, &u, &p, &w, &mut hess);

                // FD of the weighted Jacobian w^T * dstep/d(local).
                let grad = |zz: &SVector<f64, STATE_DIM>, uu: &[f64]| -> DVectorLocal {
                    let (a, b) = step_jacobian_vector(kind, zz, uu, &p);
                    let mut g = vec![0.0; n];
                    for j in 0..STATE_DIM {
                        g[j] = (0..STATE_DIM).map(|i| w[i] * a[(i, j)]).sum();
                    }
                    for j in 0..n_u {
                        g[STATE_DIM + j] = (0..STATE_DIM).map(|i| w[i] * b[(i, j)]).sum();
                    }
                    g
                };
                for col in 0..n {
                    let base = if col < STATE_DIM { z[col] } else { u[col - STATE_DIM] };
                    let hstep = 1e-6 * base.abs().max(1.0);
                    let (mut zp, mut up) = (z, u.clone());
                    let (mut zm, mut um) = (z, u.clone());
                    if col < STATE_DIM {
                        zp[col] += hstep;
                        zm[col] -= hstep;
                    } else {
                        up[col - STATE_DIM] += hstep;
                        um[col - STATE_DIM] -= hstep;
                    }
                    let gp = grad(&zp, &up);
                    let gm = grad(&zm, &um);
                    for row in 0..n {
                        let fd = (gp[row] - gm[row]) / (2.0 * hstep);
                        let rel = (hess[(row, col)] - fd).abs() / fd.abs().max(1.0);
                        assert!(
                            rel <= 2e-4,
                            "{kind} hess[{row},{col}]: analytic {} vs fd {fd}",
                            hess[(row, col)]
                        );
                    }
                }
            }
        }
    }

    type DVectorLocal = Vec<f64>;
}
