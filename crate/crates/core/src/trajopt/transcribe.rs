//! Direct transcription of landing and tracking problems onto a stacked
//! decision vector.
//!
//! Layout: states for k = 0..=H first (7 per stage), then inputs for
//! k = 0..H-1 (n_u per stage), then any input-slack variables. Dynamics
//! enter as defect equalities `z(k+1) - step(z(k), u(k)) = 0`, the initial
//! state as a pin, and the terminal condition as either a componentwise
//! window (batch plan) or a position ball on selected stages (receding
//! horizon). Input bounds, state bounds (stages 1..=H), and slack limits
//! are box constraints.
//!
//! All quantities the solver sees are scaled: decision variables by
//! per-channel characteristic magnitudes and constraint rows by the scale
//! of their component. Scales are rounded to powers of two, so packing a
//! simulated rollout and evaluating its defects reproduces exact zeros.

use nalgebra::{DMatrix, DVector, SVector};

use crate::error::{Error, Result};
use crate::model::{
    step_hessian_weighted, step_jacobian_vector, step_vector, Bound, ControlInput, ModelKind,
    ModelParams, RocketState, STATE_DIM,
};
use crate::trajopt::nlp::NlpProgram;
use crate::trajopt::problem::{LandingProblem, TerminalSpec};

/// What the transcription minimizes.
#[derive(Debug, Clone)]
pub enum ObjectiveKind {
    /// Total propellant: `sum_k F_k·dt/K`.
    Fuel,
    /// Weighted tracking of a reference window plus the weighted stage
    /// fuel term; used by the receding-horizon follower.
    Tracking {
        ref_states: Vec<RocketState>,
        ref_inputs: Vec<ControlInput>,
        wx: [f64; STATE_DIM],
        wu: Vec<f64>,
        wj: f64,
    },
}

/// Terminal condition applied to the stacked trajectory.
#[derive(Debug, Clone)]
pub enum TerminalConstraint {
    None,
    /// Batch landing window at stage H.
    Window(TerminalSpec),
    /// `x_s² + y_s² <= radius²` on each listed stage (1-based stage index
    /// into the window, i.e. values in 1..=H).
    Ball { radius: f64, stages: Vec<usize> },
}

/// One relaxable input channel: the slack variable's limit and penalty,
/// and the box that replaces the nominal channel bounds while relaxed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackChannel {
    pub channel: usize,
    pub max_slack: f64,
    pub penalty: f64,
    pub relaxed_box: Bound,
}

/// Input-bound relaxation: one slack variable per listed channel, shared
/// across all stages, widening that channel's bounds symmetrically and
/// penalized linearly in the objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlackSpec {
    pub channels: Vec<SlackChannel>,
}

/// The transcribed NLP: objective, constraint set, bounds, scaling, and
/// the Jacobian sparsity pattern, behind the [`NlpProgram`] interface.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub kind: ModelKind,
    pub params: ModelParams,
    pub x0: RocketState,
    pub horizon: usize,
    objective: ObjectiveKind,
    terminal: TerminalConstraint,
    slack: SlackSpec,
    n_u: usize,
    var_scale: DVector<f64>,
    eq_scale: DVector<f64>,
    ineq_scale: DVector<f64>,
    lb_nat: DVector<f64>,
    ub_nat: DVector<f64>,
}

/// Nearest power of two; exact to multiply and divide by.
fn pow2_scale(v: f64) -> f64 {
    f64::exp2(v.abs().max(1e-9).log2().round())
}

/// Tie-breaker weights on scaled input deviations in the fuel objective.
///
/// The fuel cost is linear and leaves genuinely flat directions (a fin
/// coefficient at near-zero airspeed changes nothing), which makes the
/// optimum a manifold and the KKT systems singular along it. Anchoring
/// inputs with a small quadratic keeps every direction determinate; the
/// fin channel needs a stronger pull because nothing else in the problem
/// gives it curvature. The total objective contribution stays below a
/// hundredth of a kilogram of propellant, far inside every reported
/// tolerance.
fn input_anchor_weights(kind: ModelKind) -> Vec<f64> {
    match kind {
        ModelKind::Tvc => vec![1e-4, 1e-4],
        ModelKind::GridFin => vec![1e-4, 1e-4, 5e-2],
    }
}

/// Anchor points per channel, in scaled units (thrust 0, gimbal 0,
/// fin coefficient at its initial-guess value).
fn input_anchor(kind: ModelKind) -> Vec<f64> {
    match kind {
        ModelKind::Tvc => vec![0.0, 0.0],
        ModelKind::GridFin => vec![0.0, 0.0, 0.9],
    }
}

impl NlpProblem {
    pub fn new(
        kind: ModelKind,
        params: ModelParams,
        x0: RocketState,
        horizon: usize,
        objective: ObjectiveKind,
        terminal: TerminalConstraint,
        slack: SlackSpec,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidProblem("horizon must be at least 1".into()));
        }
        params.validate()?;
        if !x0.is_finite() {
            return Err(Error::InvalidProblem("initial state not finite".into()));
        }
        let n_u = kind.input_dim();
        match &objective {
            ObjectiveKind::Fuel => {}
            ObjectiveKind::Tracking {
                ref_states,
                ref_inputs,
                wu,
                wx,
                wj,
            } => {
                if ref_states.len() < horizon || ref_inputs.len() < horizon {
                    return Err(Error::InvalidProblem(format!(
                        "tracking references shorter than the horizon {horizon}"
                    )));
                }
                if wu.len() != n_u {
                    return Err(Error::InvalidArgument(format!(
                        "input weight vector has {} entries, model {kind} needs {n_u}",
                        wu.len()
                    )));
                }
                if wx.iter().chain(wu.iter()).any(|w| *w < 0.0) || *wj < 0.0 {
                    return Err(Error::InvalidArgument(
                        "tracking weights must be nonnegative".into(),
                    ));
                }
                for u in ref_inputs.iter().take(horizon) {
                    if u.kind() != kind {
                        return Err(Error::InvalidProblem(
                            "reference inputs do not match the model variant".into(),
                        ));
                    }
                }
            }
        }
        match &terminal {
            TerminalConstraint::Window(w) => w.validate()?,
            TerminalConstraint::Ball { radius, stages } => {
                if *radius < 0.0 {
                    return Err(Error::InvalidProblem("ball radius must be >= 0".into()));
                }
                if stages.iter().any(|&s| s == 0 || s > horizon) {
                    return Err(Error::InvalidProblem(
                        "ball stages must lie in 1..=horizon".into(),
                    ));
                }
            }
            TerminalConstraint::None => {}
        }
        for ch in &slack.channels {
            if ch.channel >= n_u {
                return Err(Error::InvalidArgument(format!(
                    "slack channel {} out of range for {kind}",
                    ch.channel
                )));
            }
            if !(ch.max_slack > 0.0) || ch.penalty < 0.0 {
                return Err(Error::InvalidArgument(
                    "slack channels need positive limits and nonnegative penalties".into(),
                ));
            }
        }

        let mut p = Self {
            kind,
            params,
            x0,
            horizon,
            objective,
            terminal,
            slack,
            n_u,
            var_scale: DVector::zeros(0),
            eq_scale: DVector::zeros(0),
            ineq_scale: DVector::zeros(0),
            lb_nat: DVector::zeros(0),
            ub_nat: DVector::zeros(0),
        };
        p.build_scaling_and_bounds();
        Ok(p)
    }

    // ----- layout -------------------------------------------------------

    pub fn n_states_vars(&self) -> usize {
        STATE_DIM * (self.horizon + 1)
    }

    pub fn n_input_vars(&self) -> usize {
        self.n_u * self.horizon
    }

    pub fn n_slack_vars(&self) -> usize {
        self.slack.channels.len()
    }

    /// Number of dynamics defect rows (always `7·H`).
    pub fn num_defects(&self) -> usize {
        STATE_DIM * self.horizon
    }

    fn sv(&self, k: usize, i: usize) -> usize {
        STATE_DIM * k + i
    }

    fn iv(&self, k: usize, j: usize) -> usize {
        self.n_states_vars() + self.n_u * k + j
    }

    fn lv(&self, c: usize) -> usize {
        self.n_states_vars() + self.n_input_vars() + c
    }

    fn terminal_eq_rows(&self) -> usize {
        match &self.terminal {
            TerminalConstraint::Window(w) if w.pos_tol == 0.0 => 2,
            _ => 0,
        }
    }

    fn ball_rows(&self) -> usize {
        match &self.terminal {
            TerminalConstraint::Ball { stages, .. } => stages.len(),
            _ => 0,
        }
    }

    fn slack_rows(&self) -> usize {
        2 * self.horizon * self.n_slack_vars()
    }

    // ----- scaling and bounds --------------------------------------------

    fn state_scales(&self) -> [f64; STATE_DIM] {
        let pos = pow2_scale(self.x0.x.abs().max(self.x0.y.abs()).max(64.0));
        let vel = pow2_scale(self.x0.vx.abs().max(self.x0.vy.abs()).max(16.0));
        [pow2_scale(self.x0.mass), pos, pos, vel, vel, 1.0, 1.0]
    }

    fn input_scales(&self) -> Vec<f64> {
        self.params
            .input_bounds
            .channels(self.kind)
            .iter()
            .map(|b| pow2_scale(b.lo.abs().max(b.hi.abs()).max(1e-3)))
            .collect()
    }

    fn build_scaling_and_bounds(&mut self) {
        let n = self.n_states_vars() + self.n_input_vars() + self.n_slack_vars();
        let ss = self.state_scales();
        let us = self.input_scales();

        let mut d = DVector::from_element(n, 1.0);
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);

        let state_bounds = self.params.state_bounds.components();
        for k in 0..=self.horizon {
            for i in 0..STATE_DIM {
                let idx = self.sv(k, i);
                d[idx] = ss[i];
                // Stage 0 is pinned by equality rows and stays box-free so a
                // measured start just outside X remains representable.
                if k >= 1 {
                    lb[idx] = state_bounds[i].lo;
                    ub[idx] = state_bounds[i].hi;
                }
            }
        }
        if let TerminalConstraint::Window(w) = &self.terminal {
            let m = self.horizon;
            if w.pos_tol > 0.0 {
                for i in [1, 2] {
                    lb[self.sv(m, i)] = lb[self.sv(m, i)].max(-w.pos_tol);
                    ub[self.sv(m, i)] = ub[self.sv(m, i)].min(w.pos_tol);
                }
            }
            for (i, lim) in [(3, w.v_max), (4, w.v_max), (5, w.theta_max), (6, w.omega_max)] {
                lb[self.sv(m, i)] = lb[self.sv(m, i)].max(-lim);
                ub[self.sv(m, i)] = ub[self.sv(m, i)].min(lim);
            }
        }

        let channel_bounds = self.params.input_bounds.channels(self.kind);
        for k in 0..self.horizon {
            for j in 0..self.n_u {
                let idx = self.iv(k, j);
                d[idx] = us[j];
                let b = self
                    .slack
                    .channels
                    .iter()
                    .find(|c| c.channel == j)
                    .map_or(channel_bounds[j], |c| c.relaxed_box);
                lb[idx] = b.lo;
                ub[idx] = b.hi;
            }
        }
        for (c, ch) in self.slack.channels.iter().enumerate() {
            let idx = self.lv(c);
            d[idx] = us[ch.channel];
            lb[idx] = 0.0;
            ub[idx] = ch.max_slack;
        }

        let me = self.num_defects() + STATE_DIM + self.terminal_eq_rows();
        let mut r = DVector::from_element(me, 1.0);
        for k in 0..self.horizon {
            for i in 0..STATE_DIM {
                r[self.sv(k, i)] = ss[i];
            }
        }
        for i in 0..STATE_DIM {
            r[self.num_defects() + i] = ss[i];
        }
        for t in 0..self.terminal_eq_rows() {
            r[self.num_defects() + STATE_DIM + t] = ss[1];
        }

        let mi = self.slack_rows() + self.ball_rows();
        let mut q = DVector::from_element(mi, 1.0);
        let n_s = self.n_slack_vars();
        for k in 0..self.horizon {
            for (c, ch) in self.slack.channels.iter().enumerate() {
                let base = 2 * (k * n_s + c);
                q[base] = us[ch.channel];
                q[base + 1] = us[ch.channel];
            }
        }
        for b in 0..self.ball_rows() {
            q[self.slack_rows() + b] = ss[1] * ss[1];
        }

        self.var_scale = d;
        self.eq_scale = r;
        self.ineq_scale = q;
        self.lb_nat = lb;
        self.ub_nat = ub;
    }

    // ----- packing -------------------------------------------------------

    /// Natural state at stage `k` from a scaled decision vector.
    pub fn state_at(&self, x: &DVector<f64>, k: usize) -> SVector<f64, STATE_DIM> {
        let mut z = SVector::zeros();
        for i in 0..STATE_DIM {
            let idx = self.sv(k, i);
            z[i] = x[idx] * self.var_scale[idx];
        }
        z
    }

    /// Natural input channels at stage `k`.
    pub fn input_at(&self, x: &DVector<f64>, k: usize) -> Vec<f64> {
        (0..self.n_u)
            .map(|j| {
                let idx = self.iv(k, j);
                x[idx] * self.var_scale[idx]
            })
            .collect()
    }

    /// Natural slack values, ordered like the slack channels.
    pub fn slack_at(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.n_slack_vars())
            .map(|c| {
                let idx = self.lv(c);
                x[idx] * self.var_scale[idx]
            })
            .collect()
    }

    /// Packs states/inputs (and optional slack values) into a scaled
    /// decision vector. Scales are powers of two, so this is exact.
    pub fn pack(
        &self,
        states: &[RocketState],
        inputs: &[ControlInput],
        slack: &[f64],
    ) -> Result<DVector<f64>> {
        if states.len() != self.horizon + 1 || inputs.len() != self.horizon {
            return Err(Error::InvalidArgument(format!(
                "pack expects {}+1 states and {} inputs",
                self.horizon, self.horizon
            )));
        }
        let mut x = DVector::zeros(self.num_vars());
        for (k, s) in states.iter().enumerate() {
            let v = s.to_vector();
            for i in 0..STATE_DIM {
                let idx = self.sv(k, i);
                x[idx] = v[i] / self.var_scale[idx];
            }
        }
        for (k, u) in inputs.iter().enumerate() {
            let ch = u.channels();
            if ch.len() != self.n_u {
                return Err(Error::InvalidArgument(format!(
                    "input at step {k} does not match model {}",
                    self.kind
                )));
            }
            for j in 0..self.n_u {
                let idx = self.iv(k, j);
                x[idx] = ch[j] / self.var_scale[idx];
            }
        }
        for c in 0..self.n_slack_vars() {
            let idx = self.lv(c);
            x[idx] = slack.get(c).copied().unwrap_or(0.0) / self.var_scale[idx];
        }
        Ok(x)
    }

    /// Unpacks a scaled decision vector into states and inputs.
    pub fn unpack(&self, x: &DVector<f64>) -> (Vec<RocketState>, Vec<ControlInput>) {
        let states = (0..=self.horizon)
            .map(|k| RocketState::from_vector(&self.state_at(x, k)))
            .collect();
        let inputs = (0..self.horizon)
            .map(|k| {
                ControlInput::from_channels(self.kind, &self.input_at(x, k))
                    .expect("layout matches kind")
            })
            .collect();
        (states, inputs)
    }

    // ----- diagnostics ----------------------------------------------------

    /// Natural-unit residuals of a scaled point: the largest dynamics
    /// defect and the largest violation of any box bound, terminal window,
    /// slack coupling, or ball constraint.
    pub fn natural_residuals(&self, x: &DVector<f64>) -> (f64, f64) {
        let me = self.num_eq();
        let mi = self.num_ineq();
        let mut c = DVector::zeros(me);
        self.eq_constraints(x, &mut c);
        let mut max_defect = 0.0f64;
        for r in 0..self.num_defects() {
            max_defect = max_defect.max((c[r] * self.eq_scale[r]).abs());
        }

        let mut viol = 0.0f64;
        for i in 0..self.num_vars() {
            let nat = x[i] * self.var_scale[i];
            viol = viol.max(self.lb_nat[i] - nat).max(nat - self.ub_nat[i]);
        }
        if mi > 0 {
            let mut h = DVector::zeros(mi);
            self.ineq_constraints(x, &mut h);
            for r in 0..mi {
                viol = viol.max(h[r] * self.ineq_scale[r]);
            }
        }
        // Pin and terminal equality rows count as bound-style violations
        // for reporting; defects are reported separately.
        for r in self.num_defects()..me {
            viol = viol.max((c[r] * self.eq_scale[r]).abs());
        }
        (max_defect, viol.max(0.0))
    }

    /// Replaces the solver's scaled residual fields with natural-unit
    /// values measured at `x`.
    pub fn refine_report(&self, x: &DVector<f64>, report: &mut crate::trajopt::nlp::SolveReport) {
        let (defect, viol) = self.natural_residuals(x);
        report.max_defect = defect;
        report.max_bound_violation = viol;
    }

    /// Row/column pattern of the equality-constraint Jacobian.
    pub fn jacobian_sparsity(&self) -> Vec<(usize, usize)> {
        let mut pat = Vec::new();
        for k in 0..self.horizon {
            for i in 0..STATE_DIM {
                let row = self.sv(k, i);
                pat.push((row, self.sv(k + 1, i)));
                for j in 0..STATE_DIM {
                    pat.push((row, self.sv(k, j)));
                }
                for j in 0..self.n_u {
                    pat.push((row, self.iv(k, j)));
                }
            }
        }
        for i in 0..STATE_DIM {
            pat.push((self.num_defects() + i, self.sv(0, i)));
        }
        for t in 0..self.terminal_eq_rows() {
            pat.push((self.num_defects() + STATE_DIM + t, self.sv(self.horizon, 1 + t)));
        }
        pat
    }

    fn slack_penalty(&self, x: &DVector<f64>) -> f64 {
        self.slack
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let idx = self.lv(c);
                ch.penalty * x[idx] * self.var_scale[idx]
            })
            .sum()
    }

    /// Stage fuel mass `F_k·dt/K` [kg].
    fn stage_fuel(&self, thrust: f64) -> f64 {
        thrust * self.params.dt / self.params.k
    }
}

pub(crate) fn clamp_to(b: &Bound, v: f64) -> f64 {
    v.clamp(b.lo, b.hi)
}

impl NlpProgram for NlpProblem {
    fn num_vars(&self) -> usize {
        self.n_states_vars() + self.n_input_vars() + self.n_slack_vars()
    }

    fn num_eq(&self) -> usize {
        self.num_defects() + STATE_DIM + self.terminal_eq_rows()
    }

    fn num_ineq(&self) -> usize {
        self.slack_rows() + self.ball_rows()
    }

    fn bounds(&self, lb: &mut DVector<f64>, ub: &mut DVector<f64>) {
        for i in 0..self.num_vars() {
            lb[i] = self.lb_nat[i] / self.var_scale[i];
            ub[i] = self.ub_nat[i] / self.var_scale[i];
        }
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let mut total = self.slack_penalty(x);
        match &self.objective {
            ObjectiveKind::Fuel => {
                let anchor = input_anchor(self.kind);
                let aw = input_anchor_weights(self.kind);
                for k in 0..self.horizon {
                    total += self.stage_fuel(self.input_at(x, k)[0]);
                    for j in 0..self.n_u {
                        let dev = x[self.iv(k, j)] * self.var_scale[self.iv(k, j)]
                            / self.input_scales()[j]
                            - anchor[j];
                        total += aw[j] * dev * dev;
                    }
                }
            }
            ObjectiveKind::Tracking {
                ref_states,
                ref_inputs,
                wx,
                wu,
                wj,
            } => {
                for k in 0..self.horizon {
                    let z = self.state_at(x, k);
                    let u = self.input_at(x, k);
                    let zr = ref_states[k].to_vector();
                    let ur = ref_inputs[k].channels();
                    for i in 0..STATE_DIM {
                        total += (wx[i] * (z[i] - zr[i])).powi(2);
                    }
                    for j in 0..self.n_u {
                        total += (wu[j] * (u[j] - ur[j])).powi(2);
                    }
                    total += wj * self.stage_fuel(u[0]).powi(2);
                }
            }
        }
        total
    }

    fn gradient(&self, x: &DVector<f64>, grad: &mut DVector<f64>) {
        for (c, ch) in self.slack.channels.iter().enumerate() {
            let idx = self.lv(c);
            grad[idx] += ch.penalty * self.var_scale[idx];
        }
        let h_k = self.params.dt / self.params.k;
        match &self.objective {
            ObjectiveKind::Fuel => {
                let anchor = input_anchor(self.kind);
                let aw = input_anchor_weights(self.kind);
                let us = self.input_scales();
                for k in 0..self.horizon {
                    let idx = self.iv(k, 0);
                    grad[idx] += h_k * self.var_scale[idx];
                    for j in 0..self.n_u {
                        let idx = self.iv(k, j);
                        let dev = x[idx] * self.var_scale[idx] / us[j] - anchor[j];
                        grad[idx] += 2.0 * aw[j] * dev * self.var_scale[idx] / us[j];
                    }
                }
            }
            ObjectiveKind::Tracking {
                ref_states,
                ref_inputs,
                wx,
                wu,
                wj,
            } => {
                for k in 0..self.horizon {
                    let z = self.state_at(x, k);
                    let u = self.input_at(x, k);
                    let zr = ref_states[k].to_vector();
                    let ur = ref_inputs[k].channels();
                    for i in 0..STATE_DIM {
                        let idx = self.sv(k, i);
                        grad[idx] +=
                            2.0 * wx[i] * wx[i] * (z[i] - zr[i]) * self.var_scale[idx];
                    }
                    for j in 0..self.n_u {
                        let idx = self.iv(k, j);
                        grad[idx] +=
                            2.0 * wu[j] * wu[j] * (u[j] - ur[j]) * self.var_scale[idx];
                    }
                    let idx = self.iv(k, 0);
                    grad[idx] += wj * 2.0 * self.stage_fuel(u[0]) * h_k * self.var_scale[idx];
                }
            }
        }
    }

    fn eq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>) {
        for k in 0..self.horizon {
            let z = self.state_at(x, k);
            let u = self.input_at(x, k);
            let pred = step_vector(self.kind, &z, &u, &self.params);
            let next = self.state_at(x, k + 1);
            for i in 0..STATE_DIM {
                let row = self.sv(k, i);
                c[row] = (next[i] - pred[i]) / self.eq_scale[row];
            }
        }
        let z0 = self.state_at(x, 0);
        let x0 = self.x0.to_vector();
        for i in 0..STATE_DIM {
            let row = self.num_defects() + i;
            c[row] = (z0[i] - x0[i]) / self.eq_scale[row];
        }
        if self.terminal_eq_rows() == 2 {
            let zm = self.state_at(x, self.horizon);
            let base = self.num_defects() + STATE_DIM;
            c[base] = zm[1] / self.eq_scale[base];
            c[base + 1] = zm[2] / self.eq_scale[base + 1];
        }
    }

    fn eq_jacobian(&self, x: &DVector<f64>, jac: &mut DMatrix<f64>) {
        for k in 0..self.horizon {
            let z = self.state_at(x, k);
            let u = self.input_at(x, k);
            let (a, b) = step_jacobian_vector(self.kind, &z, &u, &self.params);
            for i in 0..STATE_DIM {
                let row = self.sv(k, i);
                let rs = self.eq_scale[row];
                let nxt = self.sv(k + 1, i);
                jac[(row, nxt)] = self.var_scale[nxt] / rs;
                for j in 0..STATE_DIM {
                    let col = self.sv(k, j);
                    jac[(row, col)] = -a[(i, j)] * self.var_scale[col] / rs;
                }
                for j in 0..self.n_u {
                    let col = self.iv(k, j);
                    jac[(row, col)] = -b[(i, j)] * self.var_scale[col] / rs;
                }
            }
        }
        for i in 0..STATE_DIM {
            let row = self.num_defects() + i;
            let col = self.sv(0, i);
            jac[(row, col)] = self.var_scale[col] / self.eq_scale[row];
        }
        if self.terminal_eq_rows() == 2 {
            let base = self.num_defects() + STATE_DIM;
            for t in 0..2 {
                let col = self.sv(self.horizon, 1 + t);
                jac[(base + t, col)] = self.var_scale[col] / self.eq_scale[base + t];
            }
        }
    }

    fn ineq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>) {
        let n_s = self.n_slack_vars();
        let channel_bounds = self.params.input_bounds.channels(self.kind);
        for k in 0..self.horizon {
            let u = self.input_at(x, k);
            for (ci, ch) in self.slack.channels.iter().enumerate() {
                let lam = x[self.lv(ci)] * self.var_scale[self.lv(ci)];
                let b = channel_bounds[ch.channel];
                let base = 2 * (k * n_s + ci);
                c[base] = (u[ch.channel] - b.hi - lam) / self.ineq_scale[base];
                c[base + 1] = (b.lo - u[ch.channel] - lam) / self.ineq_scale[base + 1];
            }
        }
        if let TerminalConstraint::Ball { radius, stages } = &self.terminal {
            for (bi, &s) in stages.iter().enumerate() {
                let row = self.slack_rows() + bi;
                let z = self.state_at(x, s);
                c[row] = (z[1] * z[1] + z[2] * z[2] - radius * radius) / self.ineq_scale[row];
            }
        }
    }

    fn ineq_jacobian(&self, x: &DVector<f64>, jac: &mut DMatrix<f64>) {
        let n_s = self.n_slack_vars();
        for k in 0..self.horizon {
            for (ci, ch) in self.slack.channels.iter().enumerate() {
                let ucol = self.iv(k, ch.channel);
                let lcol = self.lv(ci);
                let base = 2 * (k * n_s + ci);
                jac[(base, ucol)] = self.var_scale[ucol] / self.ineq_scale[base];
                jac[(base, lcol)] = -self.var_scale[lcol] / self.ineq_scale[base];
                jac[(base + 1, ucol)] = -self.var_scale[ucol] / self.ineq_scale[base + 1];
                jac[(base + 1, lcol)] = -self.var_scale[lcol] / self.ineq_scale[base + 1];
            }
        }
        if let TerminalConstraint::Ball { stages, .. } = &self.terminal {
            for (bi, &s) in stages.iter().enumerate() {
                let row = self.slack_rows() + bi;
                let z = self.state_at(x, s);
                for (i, zi) in [(1usize, z[1]), (2usize, z[2])] {
                    let col = self.sv(s, i);
                    jac[(row, col)] = 2.0 * zi * self.var_scale[col] / self.ineq_scale[row];
                }
            }
        }
    }

    fn lagrangian_hessian(
        &self,
        x: &DVector<f64>,
        obj_w: f64,
        eq_mult: &DVector<f64>,
        ineq_mult: &DVector<f64>,
        hess: &mut DMatrix<f64>,
    ) {
        // Objective curvature: the fuel anchor and the tracking weights.
        if let ObjectiveKind::Fuel = &self.objective {
            let us = self.input_scales();
            let aw = input_anchor_weights(self.kind);
            for k in 0..self.horizon {
                for j in 0..self.n_u {
                    let idx = self.iv(k, j);
                    let sc = self.var_scale[idx] / us[j];
                    hess[(idx, idx)] += obj_w * 2.0 * aw[j] * sc * sc;
                }
            }
        }
        if let ObjectiveKind::Tracking { wx, wu, wj, .. } = &self.objective {
            let h_k = self.params.dt / self.params.k;
            for k in 0..self.horizon {
                for i in 0..STATE_DIM {
                    let idx = self.sv(k, i);
                    hess[(idx, idx)] +=
                        obj_w * 2.0 * wx[i] * wx[i] * self.var_scale[idx] * self.var_scale[idx];
                }
                for j in 0..self.n_u {
                    let idx = self.iv(k, j);
                    hess[(idx, idx)] +=
                        obj_w * 2.0 * wu[j] * wu[j] * self.var_scale[idx] * self.var_scale[idx];
                }
                let idx = self.iv(k, 0);
                hess[(idx, idx)] +=
                    obj_w * 2.0 * wj * h_k * h_k * self.var_scale[idx] * self.var_scale[idx];
            }
        }

        // Defect curvature via the weighted step Hessian.
        let local = STATE_DIM + self.n_u;
        let mut block = DMatrix::zeros(local, local);
        for k in 0..self.horizon {
            let z = self.state_at(x, k);
            let u = self.input_at(x, k);
            let mut w = SVector::<f64, STATE_DIM>::zeros();
            let mut any = false;
            for i in 0..STATE_DIM {
                let row = self.sv(k, i);
                let wi = -eq_mult[row] / self.eq_scale[row];
                w[i] = wi;
                any |= wi != 0.0;
            }
            if !any {
                continue;
            }
            block.fill(0.0);
            step_hessian_weighted(self.kind, &z, &u, &self.params, &w, &mut block);
            for a in 0..local {
                let ia = if a < STATE_DIM {
                    self.sv(k, a)
                } else {
                    self.iv(k, a - STATE_DIM)
                };
                for b in 0..local {
                    let v = block[(a, b)];
                    if v == 0.0 {
                        continue;
                    }
                    let ib = if b < STATE_DIM {
                        self.sv(k, b)
                    } else {
                        self.iv(k, b - STATE_DIM)
                    };
                    hess[(ia, ib)] += v * self.var_scale[ia] * self.var_scale[ib];
                }
            }
        }

        // Ball curvature: 2·nu on the two position diagonals per stage.
        if let TerminalConstraint::Ball { stages, .. } = &self.terminal {
            for (bi, &s) in stages.iter().enumerate() {
                let row = self.slack_rows() + bi;
                let nu = ineq_mult[row] / self.ineq_scale[row];
                if nu == 0.0 {
                    continue;
                }
                for i in [1, 2] {
                    let idx = self.sv(s, i);
                    hess[(idx, idx)] += 2.0 * nu * self.var_scale[idx] * self.var_scale[idx];
                }
            }
        }
    }

    fn initial_guess(&self) -> DVector<f64> {
        let h = self.params.dt;
        let m = self.horizon;
        let channel_bounds = self.params.input_bounds.channels(self.kind);

        let (states, inputs) = match &self.objective {
            ObjectiveKind::Fuel => {
                // Straight-line descent to the origin, hover thrust, level
                // attitude ramp; velocities finite-difference the path so
                // the kinematic defect rows start at zero.
                let mut px = Vec::with_capacity(m + 1);
                let mut py = Vec::with_capacity(m + 1);
                let mut pth = Vec::with_capacity(m + 1);
                for k in 0..=m {
                    let a = k as f64 / m as f64;
                    px.push(self.x0.x * (1.0 - a));
                    py.push(self.x0.y * (1.0 - a));
                    pth.push(self.x0.theta * (1.0 - a));
                }
                let mut states = Vec::with_capacity(m + 1);
                let mut inputs = Vec::with_capacity(m);
                let mut mass = self.x0.mass;
                for k in 0..=m {
                    let (vx, vy, om) = if k < m {
                        (
                            (px[k + 1] - px[k]) / h,
                            (py[k + 1] - py[k]) / h,
                            (pth[k + 1] - pth[k]) / h,
                        )
                    } else {
                        (0.0, 0.0, 0.0)
                    };
                    states.push(RocketState::new(mass, px[k], py[k], vx, vy, pth[k], om));
                    if k < m {
                        let hover = clamp_to(&channel_bounds[0], mass * self.params.g0);
                        let mut u = vec![hover, clamp_to(&channel_bounds[1], 0.0)];
                        if self.kind == ModelKind::GridFin {
                            u.push(clamp_to(&channel_bounds[2], 0.9));
                        }
                        mass -= h * hover / self.params.k;
                        inputs.push(
                            ControlInput::from_channels(self.kind, &u).expect("layout"),
                        );
                    }
                }
                (states, inputs)
            }
            ObjectiveKind::Tracking { ref_inputs, .. } => {
                // Roll the reference inputs out from the pinned start.
                let mut states = Vec::with_capacity(m + 1);
                let mut inputs = Vec::with_capacity(m);
                let mut z = self.x0.to_vector();
                states.push(self.x0);
                for k in 0..m {
                    let mut u = ref_inputs[k].channels();
                    for (j, b) in channel_bounds.iter().enumerate() {
                        u[j] = clamp_to(b, u[j]);
                    }
                    z = step_vector(self.kind, &z, &u, &self.params);
                    if !z.iter().all(|v| v.is_finite()) {
                        z = self.x0.to_vector();
                    }
                    states.push(RocketState::from_vector(&z));
                    inputs.push(ControlInput::from_channels(self.kind, &u).expect("layout"));
                }
                (states, inputs)
            }
        };

        let slack_guess: Vec<f64> = self
            .slack
            .channels
            .iter()
            .map(|c| 0.5 * c.max_slack)
            .collect();
        self.pack(&states, &inputs, &slack_guess)
            .expect("guess matches layout")
    }
}

/// Transcribes the batch fuel-minimization problem.
pub fn transcribe(problem: &LandingProblem) -> Result<NlpProblem> {
    problem.validate()?;
    NlpProblem::new(
        problem.model_kind,
        problem.params.clone(),
        problem.x0,
        problem.horizon,
        ObjectiveKind::Fuel,
        TerminalConstraint::Window(problem.terminal),
        SlackSpec::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;
    use crate::trajopt::nlp::NlpProgram;
    use rand::{Rng, SeedableRng};

    fn nominal_x0() -> RocketState {
        RocketState::new(2000.0, 165.0, 1000.0, -10.0, -80.0, 0.1, 0.0)
    }

    fn landing(kind: ModelKind, horizon: usize) -> LandingProblem {
        LandingProblem {
            model_kind: kind,
            params: ModelParams::default(),
            x0: nominal_x0(),
            horizon,
            terminal: TerminalSpec::default(),
        }
    }

    #[test]
    fn decision_dimensions_match_layout() {
        let tvc = transcribe(&landing(ModelKind::Tvc, 20)).unwrap();
        assert_eq!(tvc.num_vars(), 7 * 21 + 2 * 20); // 187
        assert_eq!(tvc.num_defects(), 140);
        let gf = transcribe(&landing(ModelKind::GridFin, 20)).unwrap();
        assert_eq!(gf.num_vars(), 7 * 21 + 3 * 20); // 207
    }

    #[test]
    fn defects_vanish_on_stacked_rollouts() {
        for kind in [ModelKind::Tvc, ModelKind::GridFin] {
            for m in [1usize, 5, 20] {
                let params = ModelParams::default();
                let inputs: Vec<ControlInput> = (0..m)
                    .map(|k| {
                        let f = 15_000.0 + 500.0 * k as f64;
                        match kind {
                            ModelKind::Tvc => ControlInput::tvc(f, 0.01),
                            ModelKind::GridFin => ControlInput::grid_fin(f, 0.01, 0.9),
                        }
                    })
                    .collect();
                let traj = simulate(kind, &nominal_x0(), &inputs, &params, None).unwrap();
                let nlp = transcribe(&landing(kind, m)).unwrap();
                let x = nlp.pack(&traj.states, &traj.inputs, &[]).unwrap();
                let mut c = DVector::zeros(nlp.num_eq());
                nlp.eq_constraints(&x, &mut c);
                for r in 0..nlp.num_defects() + STATE_DIM {
                    assert_eq!(c[r], 0.0, "{kind} M={m} row {r}");
                }
            }
        }
    }

    #[test]
    fn eq_jacobian_matches_finite_differences() {
        let nlp = transcribe(&landing(ModelKind::GridFin, 4)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = nlp.num_vars();
        let me = nlp.num_eq();
        let mut x = nlp.initial_guess();
        for v in x.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let mut jac = DMatrix::zeros(me, n);
        nlp.eq_jacobian(&x, &mut jac);
        let mut cp = DVector::zeros(me);
        let mut cm = DVector::zeros(me);
        for col in 0..n {
            let h = 1e-6 * x[col].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            cp.fill(0.0);
            cm.fill(0.0);
            nlp.eq_constraints(&xp, &mut cp);
            nlp.eq_constraints(&xm, &mut cm);
            for row in 0..me {
                let fd = (cp[row] - cm[row]) / (2.0 * h);
                let rel = (jac[(row, col)] - fd).abs() / fd.abs().max(1.0);
                assert!(rel <= 1e-5, "J[{row},{col}] = {} vs fd {fd}", jac[(row, col)]);
            }
        }
    }

    #[test]
    fn sparsity_pattern_covers_every_nonzero() {
        let nlp = transcribe(&landing(ModelKind::GridFin, 3)).unwrap();
        let pat: std::collections::HashSet<(usize, usize)> =
            nlp.jacobian_sparsity().into_iter().collect();
        let mut jac = DMatrix::zeros(nlp.num_eq(), nlp.num_vars());
        let x = nlp.initial_guess();
        nlp.eq_jacobian(&x, &mut jac);
        for r in 0..nlp.num_eq() {
            for c in 0..nlp.num_vars() {
                if jac[(r, c)] != 0.0 {
                    assert!(pat.contains(&(r, c)), "nonzero outside pattern at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn tracking_gradient_and_hessian_match_finite_differences() {
        let params = ModelParams::default();
        let refs: Vec<ControlInput> = (0..4)
            .map(|_| ControlInput::grid_fin(19_000.0, 0.02, 0.9))
            .collect();
        let ref_traj = simulate(ModelKind::GridFin, &nominal_x0(), &refs, &params, None).unwrap();
        let nlp = NlpProblem::new(
            ModelKind::GridFin,
            params,
            nominal_x0(),
            4,
            ObjectiveKind::Tracking {
                ref_states: ref_traj.states.clone(),
                ref_inputs: ref_traj.inputs.clone(),
                wx: [1.0, 5.0, 5.0, 0.5, 1.0, 0.1, 0.5],
                wu: vec![2.0, 2.0, 0.5],
                wj: 2.0,
            },
            TerminalConstraint::Ball {
                radius: 15.0,
                stages: vec![4],
            },
            SlackSpec {
                channels: vec![SlackChannel {
                    channel: 0,
                    max_slack: 300.0,
                    penalty: 10.0,
                    relaxed_box: Bound::new(0.0, f64::INFINITY),
                }],
            },
        )
        .unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = nlp.num_vars();
        let mut x = nlp.initial_guess();
        for v in x.iter_mut() {
            *v += rng.random_range(0.001..0.05);
        }

        // Gradient vs FD of the objective. The objective is large, so the
        // difference quotient carries an absolute rounding floor of about
        // eps·|f|/h; the tolerance accounts for it.
        let mut grad = DVector::zeros(n);
        nlp.gradient(&x, &mut grad);
        for col in 0..n {
            let h = 1e-4 * x[col].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let fd = (nlp.objective(&xp) - nlp.objective(&xm)) / (2.0 * h);
            let tol = 1e-4f64.max(1e-3 * grad[col].abs().max(fd.abs()));
            assert!(
                (grad[col] - fd).abs() <= tol,
                "grad[{col}] = {} vs fd {fd}",
                grad[col]
            );
        }

        // Lagrangian Hessian vs FD of the Lagrangian gradient.
        let me = nlp.num_eq();
        let mi = nlp.num_ineq();
        let lam = DVector::from_fn(me, |r, _| 0.1 + 0.01 * r as f64);
        let nu = DVector::from_fn(mi, |r, _| 0.05 + 0.002 * r as f64);
        let lag_grad = |xx: &DVector<f64>| -> DVector<f64> {
            let mut g = DVector::zeros(n);
            nlp.gradient(xx, &mut g);
            let mut je = DMatrix::zeros(me, n);
            nlp.eq_jacobian(xx, &mut je);
            g += je.transpose() * &lam;
            if mi > 0 {
                let mut ji = DMatrix::zeros(mi, n);
                nlp.ineq_jacobian(xx, &mut ji);
                g += ji.transpose() * &nu;
            }
            g
        };
        let mut hess = DMatrix::zeros(n, n);
        nlp.lagrangian_hessian(&x, 1.0, &lam, &nu, &mut hess);
        for col in 0..n {
            let h = 1e-4 * x[col].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let gp = lag_grad(&xp);
            let gm = lag_grad(&xm);
            for row in 0..n {
                let fd = (gp[row] - gm[row]) / (2.0 * h);
                let tol = 0.05f64.max(2e-3 * hess[(row, col)].abs().max(fd.abs()));
                assert!(
                    (hess[(row, col)] - fd).abs() <= tol,
                    "H[{row},{col}] = {} vs fd {fd}",
                    hess[(row, col)]
                );
            }
        }
    }

    #[test]
    fn pack_unpack_roundtrip_exact() {
        let params = ModelParams::default();
        let inputs = vec![ControlInput::tvc(12_345.678, -0.123); 6];
        let traj = simulate(ModelKind::Tvc, &nominal_x0(), &inputs, &params, None).unwrap();
        let nlp = transcribe(&landing(ModelKind::Tvc, 6)).unwrap();
        let x = nlp.pack(&traj.states, &traj.inputs, &[]).unwrap();
        let (states, inputs_back) = nlp.unpack(&x);
        assert_eq!(states, traj.states);
        assert_eq!(inputs_back, traj.inputs);
    }
}
