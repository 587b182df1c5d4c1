//! A dense primal-dual interior-point solver for smooth NLPs of the form
//!
//! ```text
//! min f(x)   s.t.   g(x) = 0,   h(x) <= 0,   lb <= x <= ub
//! ```
//!
//! Box bounds get logarithmic barriers directly; general inequalities are
//! slacked (`h + s = 0, s > 0`) and barriered through the slacks. Each
//! iteration solves one dense reduced KKT system, takes a
//! fraction-to-boundary step, and backtracks on an l1-penalized barrier
//! merit. The Hessian of the Lagrangian is exact (supplied by the problem),
//! with inertia handled by progressive primal regularization.
//!
//! After convergence an active-set Newton "crossover" polish snaps
//! near-active variables onto their bounds and re-solves the resulting
//! equality-constrained KKT system, removing the O(sqrt(mu)) interior gap.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Problem functions consumed by [`solve_nlp`].
///
/// All matrices are dense; callers zero nothing ([`solve_nlp`] clears the
/// buffers before every evaluation). Bound entries may be infinite. Fixed
/// variables (`lb == ub`) are not supported; pin them with an equality row.
pub trait NlpProgram {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize {
        0
    }
    fn bounds(&self, lb: &mut DVector<f64>, ub: &mut DVector<f64>);
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>, grad: &mut DVector<f64>);
    fn eq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>);
    fn eq_jacobian(&self, x: &DVector<f64>, jac: &mut DMatrix<f64>);
    fn ineq_constraints(&self, _x: &DVector<f64>, _c: &mut DVector<f64>) {}
    fn ineq_jacobian(&self, _x: &DVector<f64>, _jac: &mut DMatrix<f64>) {}
    /// Accumulates `obj_w·Hess(f) + sum_i eq_mult_i·Hess(g_i) +
    /// sum_r ineq_mult_r·Hess(h_r)` into `hess`.
    fn lagrangian_hessian(
        &self,
        x: &DVector<f64>,
        obj_w: f64,
        eq_mult: &DVector<f64>,
        ineq_mult: &DVector<f64>,
        hess: &mut DMatrix<f64>,
    );
    fn initial_guess(&self) -> DVector<f64>;
}

/// Interior-point solver settings. Defaults satisfy the reporting contract
/// (equality residual 1e-6, bound violation 1e-8, scaled stationarity 1e-4)
/// with two orders of margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Equality-constraint infinity-norm tolerance.
    pub tol_eq: f64,
    /// Inequality violation tolerance (bounds are interior by construction).
    pub tol_ineq: f64,
    /// Scaled dual-infeasibility tolerance.
    pub tol_stat: f64,
    /// Scaled complementarity tolerance.
    pub tol_comp: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    /// Run the active-set Newton polish after interior convergence.
    pub polish: bool,
    /// Abort early when feasibility stalls far from the feasible set.
    pub infeasibility_detection: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tol_eq: 1e-9,
            tol_ineq: 1e-9,
            tol_stat: 1e-6,
            tol_comp: 1e-8,
            mu_init: 1e-1,
            mu_min: 1e-13,
            polish: true,
            infeasibility_detection: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// All tolerances met; the reported residuals are trustworthy.
    Converged,
    /// Iteration budget exhausted while still making progress.
    MaxIterations,
    /// Constraint violation stalled far from feasibility (locally
    /// infeasible problem, or one made infeasible by its bounds).
    Infeasible,
}

impl SolveStatus {
    pub fn is_converged(self) -> bool {
        matches!(self, SolveStatus::Converged)
    }
}

/// One accepted iteration, as logged (`iter,merit,defect,step_norm` in the
/// verbose CSV). `merit_pre` is the merit at the start of the iteration
/// under the same barrier parameter, so `merit <= merit_pre` holds for
/// every accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub mu: f64,
    pub merit_pre: f64,
    pub merit: f64,
    pub eq_viol: f64,
    pub ineq_viol: f64,
    pub step_norm: f64,
    pub alpha: f64,
    pub reg: f64,
}

/// Solver outcome summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    /// Final objective value (total fuel in kg for landing problems).
    pub objective: f64,
    /// Largest equality residual: dynamics defects, pins, terminal rows.
    pub max_defect: f64,
    /// Largest violation of box bounds and general inequalities.
    pub max_bound_violation: f64,
    /// Scaled first-order stationarity estimate.
    pub stationarity: f64,
    /// Scaled complementarity at exit.
    pub complementarity: f64,
    /// Wall-clock solve time in seconds. Excluded from determinism
    /// comparisons (see the formats documentation).
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub iterations_log: Vec<IterRecord>,
}

/// Primal-dual point; returned for warm starts and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub x: DVector<f64>,
    pub eq_mult: DVector<f64>,
    pub ineq_mult: DVector<f64>,
    pub ineq_slack: DVector<f64>,
    pub z_lower: DVector<f64>,
    pub z_upper: DVector<f64>,
}

struct Workspace {
    n: usize,
    me: usize,
    mi: usize,
    lb: DVector<f64>,
    ub: DVector<f64>,
    grad: DVector<f64>,
    g: DVector<f64>,
    h: DVector<f64>,
    je: DMatrix<f64>,
    ji: DMatrix<f64>,
    hess: DMatrix<f64>,
}

impl Workspace {
    fn new<P: NlpProgram + ?Sized>(p: &P) -> Self {
        let (n, me, mi) = (p.num_vars(), p.num_eq(), p.num_ineq());
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        p.bounds(&mut lb, &mut ub);
        Self {
            n,
            me,
            mi,
            lb,
            ub,
            grad: DVector::zeros(n),
            g: DVector::zeros(me),
            h: DVector::zeros(mi),
            je: DMatrix::zeros(me, n),
            ji: DMatrix::zeros(mi, n),
            hess: DMatrix::zeros(n, n),
        }
    }

    fn eval_all<P: NlpProgram + ?Sized>(&mut self, p: &P, x: &DVector<f64>) {
        self.grad.fill(0.0);
        p.gradient(x, &mut self.grad);
        if self.me > 0 {
            self.g.fill(0.0);
            self.je.fill(0.0);
            p.eq_constraints(x, &mut self.g);
            p.eq_jacobian(x, &mut self.je);
        }
        if self.mi > 0 {
            self.h.fill(0.0);
            self.ji.fill(0.0);
            p.ineq_constraints(x, &mut self.h);
            p.ineq_jacobian(x, &mut self.ji);
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Solves the program; `warm` may carry a previous [`NlpSolution`] whose
/// point and multipliers seed the iteration (a converged warm start passes
/// the iteration-0 optimality check and returns immediately).
///
/// Two step-control regimes drive the iteration: far from a solution an
/// l1-penalized barrier merit with backtracking and second-order
/// correction globalizes progress; once the iterate is feasible and
/// centered, control switches to reduction of the primal-dual residual,
/// which converges quadratically and does not suffer the Maratos effect.
pub fn solve_nlp<P: NlpProgram + ?Sized>(
    program: &P,
    config: &SolverConfig,
    warm: Option<&NlpSolution>,
) -> (NlpSolution, SolveReport) {
    let t0 = Instant::now();
    let mut ws = Workspace::new(program);
    let (n, me, mi) = (ws.n, ws.me, ws.mi);
    let debug = std::env::var_os("TOPED_IPM_DEBUG").is_some();

    // A warm point that already satisfies the optimality conditions (for
    // instance one produced by a previous converged solve) is returned
    // as-is before the interior push below could move it off its bounds.
    if let Some(w) = warm {
        if w.x.len() == n && w.eq_mult.len() == me && w.ineq_mult.len() == mi {
            if let Some(report) = check_optimal_point(program, &mut ws, w, config, t0) {
                return (w.clone(), report);
            }
        }
    }

    // --- Initial point, pushed strictly inside the bounds.
    let mut x = warm.map_or_else(|| program.initial_guess(), |w| w.x.clone());
    for i in 0..n {
        let (lo, hi) = (ws.lb[i], ws.ub[i]);
        if lo.is_finite() && hi.is_finite() {
            let pad = (1e-2 * (hi - lo)).min(1e-2 * lo.abs().max(1.0));
            x[i] = x[i].clamp(lo + pad, hi - pad);
        } else if lo.is_finite() {
            x[i] = x[i].max(lo + 1e-2 * lo.abs().max(1.0));
        } else if hi.is_finite() {
            x[i] = x[i].min(hi - 1e-2 * hi.abs().max(1.0));
        }
    }

    let mut mu = config.mu_init;
    ws.eval_all(program, &x);

    let mut s = DVector::from_element(mi, 1.0);
    let mut nu = DVector::from_element(mi, mu);
    for r in 0..mi {
        s[r] = (-ws.h[r]).max(1e-3);
        nu[r] = (mu / s[r]).clamp(1e-8, 1e8);
    }
    let mut lambda = warm.map_or_else(|| DVector::zeros(me), |w| w.eq_mult.clone());
    let mut zl = DVector::zeros(n);
    let mut zu = DVector::zeros(n);
    for i in 0..n {
        if ws.lb[i].is_finite() {
            zl[i] = (mu / (x[i] - ws.lb[i])).clamp(1e-8, 1e8);
        }
        if ws.ub[i].is_finite() {
            zu[i] = (mu / (ws.ub[i] - x[i])).clamp(1e-8, 1e8);
        }
    }
    if let Some(w) = warm {
        if w.ineq_mult.len() == mi {
            for r in 0..mi {
                nu[r] = w.ineq_mult[r].max(1e-10);
                s[r] = w.ineq_slack[r].max(1e-10);
            }
        }
        if w.z_lower.len() == n {
            for i in 0..n {
                if ws.lb[i].is_finite() {
                    zl[i] = w.z_lower[i].max(1e-12);
                }
                if ws.ub[i].is_finite() {
                    zu[i] = w.z_upper[i].max(1e-12);
                }
            }
        }
        // Start the barrier near the warm point's complementarity.
        let mut comp_max = 0.0f64;
        for i in 0..n {
            if ws.lb[i].is_finite() {
                comp_max = comp_max.max((x[i] - ws.lb[i]) * zl[i]);
            }
            if ws.ub[i].is_finite() {
                comp_max = comp_max.max((ws.ub[i] - x[i]) * zu[i]);
            }
        }
        for r in 0..mi {
            comp_max = comp_max.max(s[r] * nu[r]);
        }
        mu = comp_max.max(config.mu_min).min(config.mu_init);
    }

    let mut rho = 1.0f64; // l1 penalty weight of the globalization merit
    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut best_viol = f64::INFINITY;
    let mut stall_count = 0usize;
    let mut tiny_alpha_count = 0usize;
    let mut reg_last = 0.0f64;
    let mut acceptable_count = 0usize;
    let mut endgame_blocked_until = 0usize;
    let mut best_score = f64::INFINITY;
    let mut score_stall = 0usize;

    let dual_scale =
        |lambda: &DVector<f64>, nu: &DVector<f64>, zl: &DVector<f64>, zu: &DVector<f64>| {
            let total: f64 = lambda
                .iter()
                .chain(nu.iter())
                .chain(zl.iter())
                .chain(zu.iter())
                .map(|v| v.abs())
                .sum();
            let count = (me + mi + 2 * n).max(1) as f64;
            (total / count).max(100.0) / 100.0
        };

    for iter in 0..config.max_iter {
        // Unperturbed KKT residuals for termination.
        let mut r_stat = ws.grad.clone();
        if me > 0 {
            r_stat += ws.je.transpose() * &lambda;
        }
        if mi > 0 {
            r_stat += ws.ji.transpose() * &nu;
        }
        for i in 0..n {
            r_stat[i] += zu[i] - zl[i];
        }
        let eq_viol = inf_norm(&ws.g);
        let ineq_viol = ws.h.iter().fold(0.0f64, |a, &v| a.max(v));
        let sd = dual_scale(&lambda, &nu, &zl, &zu);
        let stat = inf_norm(&r_stat) / sd;
        let mut comp = 0.0f64;
        for i in 0..n {
            if ws.lb[i].is_finite() {
                comp = comp.max((x[i] - ws.lb[i]) * zl[i]);
            }
            if ws.ub[i].is_finite() {
                comp = comp.max((ws.ub[i] - x[i]) * zu[i]);
            }
        }
        for r in 0..mi {
            comp = comp.max(s[r] * nu[r]);
        }
        let comp_scaled = comp / sd;

        if eq_viol <= config.tol_eq
            && ineq_viol <= config.tol_ineq
            && stat <= config.tol_stat
            && comp_scaled <= config.tol_comp
        {
            status = SolveStatus::Converged;
            break;
        }

        // Degenerate problems (non-unique multipliers, flat optimum
        // directions) can dither here with feasibility long since achieved.
        // Stop and let the active-set polish plus the exit measurement
        // decide whether the point qualifies.
        if eq_viol <= config.tol_eq
            && ineq_viol <= config.tol_ineq
            && stat <= 5e-2
            && comp_scaled <= 1e-2
        {
            acceptable_count += 1;
            if acceptable_count >= 12 {
                break;
            }
        } else {
            acceptable_count = 0;
        }

        // Subproblem stagnation: near-feasible but neither converging nor
        // improving. Stop and hand over to the active-set finisher.
        let score = eq_viol + ineq_viol.max(0.0) + 1e-3 * stat.min(1e3) + comp_scaled;
        if score < best_score * 0.75 {
            best_score = score;
            score_stall = 0;
        } else {
            score_stall += 1;
        }
        if score_stall >= 50 && eq_viol <= 1e-4 && ineq_viol <= 1e-4 {
            break;
        }

        // Feasibility stall detection.
        let viol = eq_viol + ineq_viol.max(0.0);
        if viol < best_viol * 0.99 {
            best_viol = viol.min(best_viol);
            stall_count = 0;
        } else {
            stall_count += 1;
        }
        if config.infeasibility_detection
            && iter >= 25
            && stall_count >= 15
            && best_viol > (1e4 * config.tol_eq).max(1e-4)
        {
            status = SolveStatus::Infeasible;
            break;
        }

        let endgame = iter >= endgame_blocked_until
            && eq_viol <= 1e-5
            && ineq_viol <= 1e-5
            && comp_scaled <= 1e-2;

        // Barrier parameter: monotone Fiacco-McCormick while globalizing,
        // proportional to the average complementarity in the endgame.
        if endgame {
            let comp_count = mi
                + (0..n)
                    .filter(|&i| ws.lb[i].is_finite() || ws.ub[i].is_finite())
                    .count();
            let mut comp_sum = s.dot(&nu);
            for i in 0..n {
                if ws.lb[i].is_finite() {
                    comp_sum += (x[i] - ws.lb[i]) * zl[i];
                }
                if ws.ub[i].is_finite() {
                    comp_sum += (ws.ub[i] - x[i]) * zu[i];
                }
            }
            mu = (0.1 * comp_sum / comp_count.max(1) as f64).clamp(config.mu_min, config.mu_init);
        } else {
            loop {
                let mut comp_mu = 0.0f64;
                for i in 0..n {
                    if ws.lb[i].is_finite() {
                        comp_mu = comp_mu.max(((x[i] - ws.lb[i]) * zl[i] - mu).abs());
                    }
                    if ws.ub[i].is_finite() {
                        comp_mu = comp_mu.max(((ws.ub[i] - x[i]) * zu[i] - mu).abs());
                    }
                }
                for r in 0..mi {
                    comp_mu = comp_mu.max((s[r] * nu[r] - mu).abs());
                }
                let err_mu = stat.max(eq_viol).max(ineq_viol).max(comp_mu / sd);
                if err_mu <= 10.0 * mu && mu > config.mu_min {
                    mu = (0.2 * mu).min(mu.powf(1.5)).max(config.mu_min);
                } else {
                    break;
                }
            }
        }
        let tau = 0.99f64.max(1.0 - mu);

        // Assemble the reduced KKT system.
        ws.hess.fill(0.0);
        program.lagrangian_hessian(&x, 1.0, &lambda, &nu, &mut ws.hess);

        let mut sigma_b = DVector::<f64>::zeros(n);
        for i in 0..n {
            if ws.lb[i].is_finite() {
                sigma_b[i] += zl[i] / (x[i] - ws.lb[i]);
            }
            if ws.ub[i].is_finite() {
                sigma_b[i] += zu[i] / (ws.ub[i] - x[i]);
            }
        }
        let sigma_s: DVector<f64> =
            DVector::from_iterator(mi, (0..mi).map(|r| (nu[r] / s[r]).clamp(1e-12, 1e16)));

        let dim = n + me;
        let mut rhs_x = -ws.grad.clone();
        if me > 0 {
            rhs_x -= ws.je.transpose() * &lambda;
        }
        for i in 0..n {
            if ws.lb[i].is_finite() {
                rhs_x[i] += mu / (x[i] - ws.lb[i]);
            }
            if ws.ub[i].is_finite() {
                rhs_x[i] -= mu / (ws.ub[i] - x[i]);
            }
        }
        if mi > 0 {
            // -Ji^T (mu/s + Sigma_s·h + nu)
            let w: DVector<f64> = DVector::from_iterator(
                mi,
                (0..mi).map(|r| mu / s[r] + sigma_s[r] * ws.h[r] + nu[r]),
            );
            rhs_x -= ws.ji.transpose() * w;
        }

        // Newton direction with progressive primal regularization: retry on
        // factorization failure, inaccurate solves, or nonpositive curvature
        // along the step.
        let theta0: f64 = ws.g.iter().map(|v| v.abs()).sum::<f64>()
            + (0..mi).map(|r| (ws.h[r] + s[r]).abs()).sum::<f64>();
        let mut reg = 0.0f64;
        let mut kkt_failed = false;
        let (mut dx, mut dlambda, mut ds, mut dnu, rho_new, dphi, kkt) = loop {
            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..n {
                for j in 0..n {
                    kkt[(i, j)] = ws.hess[(i, j)];
                }
                kkt[(i, i)] += sigma_b[i] + reg;
            }
            if mi > 0 {
                for r in 0..mi {
                    let sr = sigma_s[r];
                    for i in 0..n {
                        let jri = ws.ji[(r, i)];
                        if jri == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            kkt[(i, j)] += sr * jri * ws.ji[(r, j)];
                        }
                    }
                }
            }
            for r in 0..me {
                for i in 0..n {
                    kkt[(n + r, i)] = ws.je[(r, i)];
                    kkt[(i, n + r)] = ws.je[(r, i)];
                }
                kkt[(n + r, n + r)] = -1e-11;
            }

            let mut rhs = DVector::<f64>::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&rhs_x);
            for r in 0..me {
                rhs[n + r] = -ws.g[r];
            }

            let bump = |r: f64| {
                if r == 0.0 {
                    (reg_last / 100.0).max(1e-8)
                } else {
                    r * 100.0
                }
            };
            let fail = (
                DVector::zeros(n),
                DVector::zeros(me),
                DVector::zeros(mi),
                DVector::zeros(mi),
                rho,
                0.0,
                DMatrix::zeros(0, 0),
            );
            let solved = kkt
                .clone()
                .lu()
                .solve(&rhs)
                .filter(|sol| inf_norm(&(&kkt * sol - &rhs)) / inf_norm(&rhs).max(1.0) <= 1e-6);
            let Some(sol) = solved else {
                reg = bump(reg);
                if reg > 1e10 {
                    kkt_failed = true;
                    break fail;
                }
                continue;
            };
            let dx = sol.rows(0, n).into_owned();

            // Curvature surrogate for the inertia condition.
            let mut hdx = DVector::<f64>::zeros(n);
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += kkt[(i, j)] * dx[j];
                }
                hdx[i] = acc;
            }
            let dxdx = dx.dot(&dx);
            if dx.dot(&hdx) < 1e-10 * dxdx && dxdx > 0.0 {
                reg = bump(reg);
                if reg > 1e10 {
                    kkt_failed = true;
                    break fail;
                }
                continue;
            }

            let dlambda = sol.rows(n, me).into_owned();
            let ds: DVector<f64> = if mi > 0 {
                let jd = &ws.ji * &dx;
                DVector::from_iterator(mi, (0..mi).map(|r| -(ws.h[r] + s[r]) - jd[r]))
            } else {
                DVector::zeros(0)
            };
            let dnu: DVector<f64> = DVector::from_iterator(
                mi,
                (0..mi).map(|r| mu / s[r] - nu[r] - sigma_s[r] * ds[r]),
            );

            // Merit penalty weight covering the new multiplier estimates.
            let mult_norm = inf_norm(&(&lambda + &dlambda)).max(inf_norm(&(&nu + &dnu)));
            let rho_new = rho.max(2.0 * mult_norm).max(1.0).min(1e12);

            let mut dphi = ws.grad.dot(&dx) - rho_new * theta0;
            for i in 0..n {
                if ws.lb[i].is_finite() {
                    dphi -= mu * dx[i] / (x[i] - ws.lb[i]);
                }
                if ws.ub[i].is_finite() {
                    dphi += mu * dx[i] / (ws.ub[i] - x[i]);
                }
            }
            for r in 0..mi {
                dphi -= mu * ds[r] / s[r];
            }

            if endgame || dphi < -1e-14 * (1.0 + theta0 * rho_new) || reg > 1e10 {
                break (dx, dlambda, ds, dnu, rho_new, dphi, kkt);
            }
            reg = bump(reg);
        };

        if kkt_failed || (inf_norm(&dx) == 0.0 && inf_norm(&dlambda) == 0.0) {
            status = SolveStatus::Infeasible;
            break;
        }
        rho = rho_new;
        reg_last = reg;

        // Fraction-to-boundary limits for a candidate direction.
        let ftb_p = |dxv: &DVector<f64>, dsv: &DVector<f64>| -> f64 {
            let mut a = 1.0f64;
            for i in 0..n {
                if ws.lb[i].is_finite() && dxv[i] < 0.0 {
                    a = a.min(tau * (x[i] - ws.lb[i]) / -dxv[i]);
                }
                if ws.ub[i].is_finite() && dxv[i] > 0.0 {
                    a = a.min(tau * (ws.ub[i] - x[i]) / dxv[i]);
                }
            }
            for r in 0..mi {
                if dsv[r] < 0.0 {
                    a = a.min(tau * s[r] / -dsv[r]);
                }
            }
            a
        };
        let ftb_d = |dzlv: &DVector<f64>, dzuv: &DVector<f64>, dnuv: &DVector<f64>| -> f64 {
            let mut a = 1.0f64;
            for i in 0..n {
                if ws.lb[i].is_finite() && dzlv[i] < 0.0 {
                    a = a.min(tau * zl[i] / -dzlv[i]);
                }
                if ws.ub[i].is_finite() && dzuv[i] < 0.0 {
                    a = a.min(tau * zu[i] / -dzuv[i]);
                }
            }
            for r in 0..mi {
                if dnuv[r] < 0.0 {
                    a = a.min(tau * nu[r] / -dnuv[r]);
                }
            }
            a
        };

        let dzl_dzu = |dxv: &DVector<f64>, step: f64| -> (DVector<f64>, DVector<f64>) {
            let mut dzl = DVector::<f64>::zeros(n);
            let mut dzu = DVector::<f64>::zeros(n);
            for i in 0..n {
                if ws.lb[i].is_finite() {
                    dzl[i] = mu / (x[i] - ws.lb[i])
                        - zl[i]
                        - (zl[i] / (x[i] - ws.lb[i])) * (step * dxv[i]);
                }
                if ws.ub[i].is_finite() {
                    dzu[i] = mu / (ws.ub[i] - x[i]) - zu[i]
                        + (zu[i] / (ws.ub[i] - x[i])) * (step * dxv[i]);
                }
            }
            (dzl, dzu)
        };

        let mut alpha_p = ftb_p(&dx, &ds);
        let alpha: f64;
        let accepted: bool;
        let mut used_endgame = false;
        let merit_pre;
        let mut merit_post;

        if endgame {
            // --- Residual-reduction step control on the mu-perturbed
            // primal-dual system; both step lengths shrink together.
            used_endgame = true;
            let residual_norm = |xt: &DVector<f64>,
                                 st: &DVector<f64>,
                                 lt: &DVector<f64>,
                                 nt: &DVector<f64>,
                                 zlt: &DVector<f64>,
                                 zut: &DVector<f64>|
             -> f64 {
                let mut grad = DVector::zeros(n);
                program.gradient(xt, &mut grad);
                let mut r = grad;
                let mut worst = 0.0f64;
                if me > 0 {
                    let mut gt = DVector::zeros(me);
                    program.eq_constraints(xt, &mut gt);
                    let mut je = DMatrix::zeros(me, n);
                    program.eq_jacobian(xt, &mut je);
                    r += je.transpose() * lt;
                    worst = worst.max(inf_norm(&gt));
                }
                if mi > 0 {
                    let mut ht = DVector::zeros(mi);
                    program.ineq_constraints(xt, &mut ht);
                    let mut ji = DMatrix::zeros(mi, n);
                    program.ineq_jacobian(xt, &mut ji);
                    r += ji.transpose() * nt;
                    for rr in 0..mi {
                        worst = worst.max((ht[rr] + st[rr]).abs());
                        worst = worst.max((st[rr] * nt[rr] - mu).abs());
                    }
                }
                for i in 0..n {
                    r[i] += zut[i] - zlt[i];
                    if ws.lb[i].is_finite() {
                        worst = worst.max(((xt[i] - ws.lb[i]) * zlt[i] - mu).abs());
                    }
                    if ws.ub[i].is_finite() {
                        worst = worst.max(((ws.ub[i] - xt[i]) * zut[i] - mu).abs());
                    }
                }
                if !worst.is_finite() {
                    return f64::INFINITY;
                }
                worst.max(inf_norm(&r))
            };

            let (dzl0, dzu0) = dzl_dzu(&dx, 1.0);
            let alpha_d0 = ftb_d(&dzl0, &dzu0, &dnu);
            let res0 = residual_norm(&x, &s, &lambda, &nu, &zl, &zu);
            merit_pre = res0;
            merit_post = res0;
            let mut scale = 1.0f64;
            let mut ok = false;
            for _ in 0..20 {
                let ap = alpha_p * scale;
                let ad = alpha_d0 * scale;
                let (dzl, dzu) = dzl_dzu(&dx, ap);
                let xt = &x + &dx * ap;
                let st = &s + &ds * ap;
                let lt = &lambda + &dlambda * ad;
                let nt = &nu + &dnu * ad;
                let zlt = &zl + &dzl * ad;
                let zut = &zu + &dzu * ad;
                let res_new = residual_norm(&xt, &st, &lt, &nt, &zlt, &zut);
                if res_new <= (1.0 - 1e-4 * ap) * res0 || res_new <= 0.1 * mu {
                    x = xt;
                    s = st;
                    lambda = lt;
                    nu = nt;
                    zl = zlt;
                    zu = zut;
                    merit_post = res_new;
                    ok = true;
                    break;
                }
                scale *= 0.5;
            }
            alpha = alpha_p * scale;
            accepted = ok;
            if !ok {
                // The endgame controller cannot make progress here; block
                // it for a while and fall back to the merit phase.
                endgame_blocked_until = iter + 10;
            }
        } else {
            // --- Globalization: backtracking on the l1 barrier merit with
            // one second-order correction attempt per iteration.
            let merit = |xt: &DVector<f64>, st: &DVector<f64>| -> f64 {
                let mut m = program.objective(xt);
                for i in 0..n {
                    if ws.lb[i].is_finite() {
                        let d = xt[i] - ws.lb[i];
                        if d <= 0.0 {
                            return f64::INFINITY;
                        }
                        m -= mu * d.ln();
                    }
                    if ws.ub[i].is_finite() {
                        let d = ws.ub[i] - xt[i];
                        if d <= 0.0 {
                            return f64::INFINITY;
                        }
                        m -= mu * d.ln();
                    }
                }
                let mut gt = DVector::zeros(me);
                if me > 0 {
                    program.eq_constraints(xt, &mut gt);
                }
                let mut theta: f64 = gt.iter().map(|v| v.abs()).sum();
                if mi > 0 {
                    let mut ht = DVector::zeros(mi);
                    program.ineq_constraints(xt, &mut ht);
                    for r in 0..mi {
                        if st[r] <= 0.0 {
                            return f64::INFINITY;
                        }
                        m -= mu * st[r].ln();
                        theta += (ht[r] + st[r]).abs();
                    }
                }
                if !m.is_finite() {
                    return f64::INFINITY;
                }
                m + rho * theta
            };

            let merit0 = merit(&x, &s);
            merit_pre = merit0;
            merit_post = merit0;
            let mut a = alpha_p;
            let mut ok = false;
            let mut soc_tried = false;
            for trial in 0..40 {
                let xt = &x + &dx * a;
                let st = &s + &ds * a;
                let m_new = merit(&xt, &st);
                if m_new <= merit0 + 1e-4 * a * dphi.min(0.0) && m_new.is_finite() {
                    merit_post = m_new;
                    ok = true;
                    break;
                }

                // Second-order correction: re-solve the same system with
                // the equality values sampled at the rejected trial point.
                if trial == 0 && !soc_tried && me > 0 && kkt.nrows() == dim {
                    soc_tried = true;
                    let mut g_trial = DVector::zeros(me);
                    program.eq_constraints(&xt, &mut g_trial);
                    let mut rhs2 = DVector::<f64>::zeros(dim);
                    rhs2.rows_mut(0, n).copy_from(&rhs_x);
                    for r in 0..me {
                        rhs2[n + r] = -(a * ws.g[r] + g_trial[r]);
                    }
                    let sol2 = kkt
                        .clone()
                        .lu()
                        .solve(&rhs2)
                        .filter(|v| v.iter().all(|c| c.is_finite()));
                    if let Some(sol2) = sol2 {
                        let dx2 = sol2.rows(0, n).into_owned();
                        let dl2 = sol2.rows(n, me).into_owned();
                        let ds2: DVector<f64> = if mi > 0 {
                            let jd = &ws.ji * &dx2;
                            DVector::from_iterator(
                                mi,
                                (0..mi).map(|r| -(ws.h[r] + s[r]) - jd[r]),
                            )
                        } else {
                            DVector::zeros(0)
                        };
                        let dnu2: DVector<f64> = DVector::from_iterator(
                            mi,
                            (0..mi).map(|r| mu / s[r] - nu[r] - sigma_s[r] * ds2[r]),
                        );
                        let a2 = ftb_p(&dx2, &ds2);
                        let m2 = merit(&(&x + &dx2 * a2), &(&s + &ds2 * a2));
                        if m2 <= merit0 + 1e-4 * a2 * dphi.min(0.0) && m2.is_finite() {
                            dx = dx2;
                            dlambda = dl2;
                            ds = ds2;
                            dnu = dnu2;
                            a = a2;
                            alpha_p = a2;
                            merit_post = m2;
                            ok = true;
                            break;
                        }
                    }
                }
                a *= 0.5;
            }
            if !ok {
                // Forced sliver step; the stall counters decide whether
                // this run is going anywhere.
                a = alpha_p * 1e-10;
            }
            alpha = a;
            accepted = ok;

            // All dual directions correspond to the full Newton step and
            // move with the dual step length, staying mutually consistent
            // even when the primal backtracks.
            let (dzl, dzu) = dzl_dzu(&dx, 1.0);
            let alpha_d = ftb_d(&dzl, &dzu, &dnu);
            x += &dx * alpha;
            s += &ds * alpha;
            lambda += &dlambda * alpha_d;
            nu += &dnu * alpha_d;
            zl += &dzl * alpha_d;
            zu += &dzu * alpha_d;
        }

        if !accepted || alpha < 1e-8 {
            tiny_alpha_count += 1;
        } else {
            tiny_alpha_count = 0;
        }
        if config.infeasibility_detection
            && tiny_alpha_count >= 8
            && (eq_viol + ineq_viol.max(0.0)) > (1e4 * config.tol_eq).max(1e-4)
        {
            status = SolveStatus::Infeasible;
            break;
        }

        // Keep bound duals within a wide window of their barrier values.
        const KAPPA: f64 = 1e10;
        for i in 0..n {
            if ws.lb[i].is_finite() {
                let ref_v = mu / (x[i] - ws.lb[i]);
                zl[i] = zl[i].clamp(ref_v / KAPPA, ref_v * KAPPA).max(1e-40);
            }
            if ws.ub[i].is_finite() {
                let ref_v = mu / (ws.ub[i] - x[i]);
                zu[i] = zu[i].clamp(ref_v / KAPPA, ref_v * KAPPA).max(1e-40);
            }
        }
        for r in 0..mi {
            nu[r] = nu[r].max(1e-40);
            s[r] = s[r].max(1e-300);
        }

        ws.eval_all(program, &x);
        if debug {
            eprintln!(
                "ipm it {iter}: {} mu={mu:.1e} rho={rho:.1e} |lam|={:.2e} |dx|={:.2e} alpha={alpha:.2e} eq={:.2e} stat={stat:.2e} comp={comp_scaled:.2e} reg={reg:.1e}",
                if used_endgame { "end" } else { "glb" },
                inf_norm(&lambda),
                inf_norm(&dx),
                inf_norm(&ws.g),
            );
        }
        log.push(IterRecord {
            iter,
            mu,
            merit_pre,
            merit: merit_post,
            eq_viol: inf_norm(&ws.g),
            ineq_viol: ws.h.iter().fold(0.0f64, |a, &v| a.max(v)),
            step_norm: inf_norm(&dx) * alpha,
            alpha,
            reg,
        });
    }

    if status == SolveStatus::MaxIterations && log.len() >= config.max_iter {
        let viol = inf_norm(&ws.g) + ws.h.iter().fold(0.0f64, |a, &v| a.max(v));
        if viol > (1e4 * config.tol_eq).max(1e-4) {
            status = SolveStatus::Infeasible;
        }
    }

    let mut solution = NlpSolution {
        x,
        eq_mult: lambda,
        ineq_mult: nu,
        ineq_slack: s,
        z_lower: zl,
        z_upper: zu,
    };

    if status != SolveStatus::Infeasible && config.polish {
        ws.eval_all(program, &solution.x);
        let near_feasible = inf_norm(&ws.g) <= 1e-4
            && ws.h.iter().fold(0.0f64, |a, &v| a.max(v)) <= 1e-4;
        if status == SolveStatus::Converged || near_feasible {
            polish_active_set(program, &mut ws, &mut solution, mu);
        }
    }

    // Final report numbers, measured at the returned point.
    ws.eval_all(program, &solution.x);
    let eq_viol = inf_norm(&ws.g);
    let mut bound_viol = ws.h.iter().fold(0.0f64, |a, &v| a.max(v));
    for i in 0..n {
        bound_viol = bound_viol
            .max(ws.lb[i] - solution.x[i])
            .max(solution.x[i] - ws.ub[i]);
    }
    let mut r_stat = ws.grad.clone();
    if me > 0 {
        r_stat += ws.je.transpose() * &solution.eq_mult;
    }
    if mi > 0 {
        r_stat += ws.ji.transpose() * &solution.ineq_mult;
    }
    for i in 0..n {
        r_stat[i] += solution.z_upper[i] - solution.z_lower[i];
    }
    let sd = dual_scale(
        &solution.eq_mult,
        &solution.ineq_mult,
        &solution.z_lower,
        &solution.z_upper,
    );
    let mut comp = 0.0f64;
    for i in 0..n {
        if ws.lb[i].is_finite() {
            comp = comp.max(((solution.x[i] - ws.lb[i]) * solution.z_lower[i]).abs());
        }
        if ws.ub[i].is_finite() {
            comp = comp.max(((ws.ub[i] - solution.x[i]) * solution.z_upper[i]).abs());
        }
    }
    for r in 0..mi {
        comp = comp.max((solution.ineq_slack[r] * solution.ineq_mult[r]).abs());
    }

    // The exit status reflects what the returned point actually satisfies:
    // a stalled run whose polished point meets every tolerance is converged.
    if status == SolveStatus::MaxIterations
        && eq_viol <= config.tol_eq
        && bound_viol.max(0.0) <= config.tol_ineq
        && inf_norm(&r_stat) / sd <= config.tol_stat
        && comp / sd <= config.tol_comp
    {
        status = SolveStatus::Converged;
    }

    let report = SolveReport {
        status,
        iterations: log.len(),
        objective: program.objective(&solution.x),
        max_defect: eq_viol,
        max_bound_violation: bound_viol.max(0.0),
        stationarity: inf_norm(&r_stat) / sd,
        complementarity: comp / sd,
        wall_time_s: t0.elapsed().as_secs_f64(),
        iterations_log: log,
    };
    (solution, report)
}

/// Zero-iteration exit for warm starts: reports `Converged` when the warm
/// primal-dual point already meets every tolerance.
fn check_optimal_point<P: NlpProgram + ?Sized>(
    program: &P,
    ws: &mut Workspace,
    w: &NlpSolution,
    config: &SolverConfig,
    t0: Instant,
) -> Option<SolveReport> {
    let (n, me, mi) = (ws.n, ws.me, ws.mi);
    ws.eval_all(program, &w.x);

    let eq_viol = inf_norm(&ws.g);
    let mut bound_viol = ws.h.iter().fold(0.0f64, |a, &v| a.max(v));
    for i in 0..n {
        bound_viol = bound_viol.max(ws.lb[i] - w.x[i]).max(w.x[i] - ws.ub[i]);
    }
    let mut r_stat = ws.grad.clone();
    if me > 0 {
        r_stat += ws.je.transpose() * &w.eq_mult;
    }
    if mi > 0 {
        r_stat += ws.ji.transpose() * &w.ineq_mult;
    }
    for i in 0..n {
        r_stat[i] += w.z_upper[i] - w.z_lower[i];
    }
    let total: f64 = w
        .eq_mult
        .iter()
        .chain(w.ineq_mult.iter())
        .chain(w.z_lower.iter())
        .chain(w.z_upper.iter())
        .map(|v| v.abs())
        .sum();
    let sd = (total / ((me + mi + 2 * n).max(1) as f64)).max(100.0) / 100.0;
    let mut comp = 0.0f64;
    for i in 0..n {
        if ws.lb[i].is_finite() {
            comp = comp.max(((w.x[i] - ws.lb[i]) * w.z_lower[i]).abs());
        }
        if ws.ub[i].is_finite() {
            comp = comp.max(((ws.ub[i] - w.x[i]) * w.z_upper[i]).abs());
        }
    }
    for r in 0..mi {
        comp = comp.max((w.ineq_slack[r] * w.ineq_mult[r]).abs());
    }

    let ok = eq_viol <= config.tol_eq
        && bound_viol <= config.tol_ineq
        && inf_norm(&r_stat) / sd <= config.tol_stat
        && comp / sd <= config.tol_comp;
    ok.then(|| SolveReport {
        status: SolveStatus::Converged,
        iterations: 0,
        objective: program.objective(&w.x),
        max_defect: eq_viol,
        max_bound_violation: bound_viol.max(0.0),
        stationarity: inf_norm(&r_stat) / sd,
        complementarity: comp / sd,
        wall_time_s: t0.elapsed().as_secs_f64(),
        iterations_log: Vec::new(),
    })
}

/// Active-set Newton polish ("crossover"): snaps near-active variables to
/// their bounds, treats near-active inequalities as equalities, and runs a
/// few full Newton steps on the resulting equality-constrained KKT system.
/// Reverts unless the polished point is strictly better on both feasibility
/// and stationarity and respects every inactive constraint.
fn polish_active_set<P: NlpProgram + ?Sized>(
    program: &P,
    ws: &mut Workspace,
    sol: &mut NlpSolution,
    mu_final: f64,
) {
    let (n, me, mi) = (ws.n, ws.me, ws.mi);
    let act_tol = (10.0 * mu_final).clamp(1e-6, 1e-4);

    ws.eval_all(program, &sol.x);

    // Classify activity: a bound is treated as active when the iterate
    // sits close to it and its dual dominates the distance (the usual
    // strict-complementarity split), so a barrier parameter stuck above
    // its floor does not blur the active set.
    let mut fix_lo = vec![false; n];
    let mut fix_hi = vec![false; n];
    for i in 0..n {
        if ws.lb[i].is_finite() {
            let dist = sol.x[i] - ws.lb[i];
            let rel = ws.lb[i].abs().max(1.0);
            if dist <= act_tol * rel || (dist <= 1e-3 * rel && sol.z_lower[i] >= dist) {
                fix_lo[i] = true;
                continue;
            }
        }
        if ws.ub[i].is_finite() {
            let dist = ws.ub[i] - sol.x[i];
            let rel = ws.ub[i].abs().max(1.0);
            if dist <= act_tol * rel || (dist <= 1e-3 * rel && sol.z_upper[i] >= dist) {
                fix_hi[i] = true;
            }
        }
    }
    let active_ineq: Vec<usize> = (0..mi)
        .filter(|&r| {
            let dist = sol.ineq_slack[r];
            dist <= act_tol || (dist <= 1e-3 && sol.ineq_mult[r] >= dist)
        })
        .collect();

    let mut active_ineq = active_ineq;
    let n_fix = fix_lo.iter().chain(fix_hi.iter()).filter(|&&b| b).count();
    if me + active_ineq.len() + n_fix > n {
        return; // over-determined active set; leave the interior point alone
    }

    let mut x = sol.x.clone();
    for i in 0..n {
        if fix_lo[i] {
            x[i] = ws.lb[i];
        }
        if fix_hi[i] {
            x[i] = ws.ub[i];
        }
    }

    let debug = std::env::var_os("TOPED_IPM_DEBUG").is_some();
    let before = kkt_quality(program, ws, &sol.x, &sol.eq_mult, &sol.ineq_mult);
    if debug {
        eprintln!(
            "polish: act_tol={act_tol:.1e} n_fix={n_fix} act_ineq={} before=({:.2e},{:.2e})",
            active_ineq.len(),
            before.0,
            before.1
        );
    }
    let mut lambda = sol.eq_mult.clone();
    let mut nu_act: DVector<f64> = DVector::from_iterator(
        active_ineq.len(),
        active_ineq.iter().map(|&r| sol.ineq_mult[r]),
    );

    for pass in 0..30 {
        let rows = me
            + active_ineq.len()
            + fix_lo.iter().chain(fix_hi.iter()).filter(|&&b| b).count();
        if rows > n {
            if debug {
                eprintln!("polish: revert (active set grew past the variable count)");
            }
            return;
        }
        ws.eval_all(program, &x);
        let mut nu_full = DVector::zeros(mi);
        for (k, &r) in active_ineq.iter().enumerate() {
            nu_full[r] = nu_act[k];
        }
        ws.hess.fill(0.0);
        program.lagrangian_hessian(&x, 1.0, &lambda, &nu_full, &mut ws.hess);

        let dim = n + rows;
        // Damped Newton: flat directions at degenerate optima make the
        // active-set system near-singular, so the damping grows until the
        // correction is a bounded nudge. Constraint rows stay exact at any
        // damping level, and repeated passes remove the damping bias.
        let mut damping = 1e-10;
        let (d, t) = loop {
            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            for i in 0..n {
                for j in 0..n {
                    kkt[(i, j)] = ws.hess[(i, j)];
                }
                kkt[(i, i)] += damping * (1.0 + ws.hess[(i, i)].abs());
                rhs[i] = -ws.grad[i];
            }
            for r in n..dim {
                kkt[(r, r)] = -1e-10;
            }
            let mut row = n;
            for r in 0..me {
                for j in 0..n {
                    kkt[(row, j)] = ws.je[(r, j)];
                    kkt[(j, row)] = ws.je[(r, j)];
                }
                rhs[row] = -ws.g[r];
                row += 1;
            }
            for &r in &active_ineq {
                for j in 0..n {
                    kkt[(row, j)] = ws.ji[(r, j)];
                    kkt[(j, row)] = ws.ji[(r, j)];
                }
                rhs[row] = -ws.h[r];
                row += 1;
            }
            for i in 0..n {
                if fix_lo[i] || fix_hi[i] {
                    kkt[(row, i)] = 1.0;
                    kkt[(i, row)] = 1.0;
                    rhs[row] = 0.0; // already snapped onto the bound
                    row += 1;
                }
            }

            let solved = kkt
                .lu()
                .solve(&rhs)
                .filter(|d| d.iter().all(|v| v.is_finite()));
            match solved {
                Some(d) => {
                    // Clip oversized corrections instead of giving up; the
                    // passes then act as a damped Newton walk.
                    let dx_norm = (0..n).fold(0.0f64, |a, i| a.max(d[i].abs()));
                    let t = if dx_norm > 0.5 { 0.5 / dx_norm } else { 1.0 };
                    break (d, t);
                }
                None if damping < 1e-1 => damping *= 100.0,
                None => {
                    if debug {
                        eprintln!("polish: revert (unbounded correction at any damping)");
                    }
                    return;
                }
            }
        };

        for i in 0..n {
            x[i] += t * d[i];
        }
        // Multipliers come back as totals (the rhs used -grad); a clipped
        // primal step blends them by the same factor.
        for r in 0..me {
            lambda[r] = (1.0 - t) * lambda[r] + t * d[n + r];
        }
        for (k, _) in active_ineq.iter().enumerate() {
            nu_act[k] = (1.0 - t) * nu_act[k] + t * d[n + me + k];
        }
        // Once the current working set is solved (tiny correction), release
        // the single worst misclassified bound: one whose implied dual has
        // the wrong sign. Releasing mid-walk or in batches cycles.
        let mut grew = false;
        let step_settled = t * (0..n).fold(0.0f64, |a, i| a.max(d[i].abs())) < 1e-6;
        if step_settled {
            ws.eval_all(program, &x);
            let mut r = ws.grad.clone();
            if me > 0 {
                r += ws.je.transpose() * &lambda;
            }
            for (k, &ri) in active_ineq.iter().enumerate() {
                for j in 0..n {
                    r[j] += ws.ji[(ri, j)] * nu_act[k];
                }
            }
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let implied = if fix_lo[i] {
                    r[i]
                } else if fix_hi[i] {
                    -r[i]
                } else {
                    continue;
                };
                if implied < -1e-9 && worst.is_none_or(|(_, w)| implied < w) {
                    worst = Some((i, implied));
                }
            }
            if let Some((i, _)) = worst {
                fix_lo[i] = false;
                fix_hi[i] = false;
                grew = true;
            }
        }
        for i in 0..n {
            if fix_lo[i] || fix_hi[i] {
                continue;
            }
            if ws.lb[i].is_finite() && x[i] <= ws.lb[i] {
                x[i] = ws.lb[i];
                fix_lo[i] = true;
                grew = true;
            } else if ws.ub[i].is_finite() && x[i] >= ws.ub[i] {
                x[i] = ws.ub[i];
                fix_hi[i] = true;
                grew = true;
            }
        }
        if mi > 0 {
            let mut h_now = DVector::zeros(mi);
            program.ineq_constraints(&x, &mut h_now);
            for r in 0..mi {
                if h_now[r] > 0.0 && !active_ineq.contains(&r) {
                    active_ineq.push(r);
                    nu_act = nu_act.push(0.0);
                    grew = true;
                }
            }
        }

        let dx_norm = t * (0..n).fold(0.0f64, |a, i| a.max(d[i].abs()));
        if debug {
            eprintln!(
                "polish: pass {pass} damping={damping:.1e} |dx|={dx_norm:.2e} t={t:.2e} grew={grew}"
            );
        }
        if !grew && dx_norm < 1e-11 {
            break;
        }
    }

    // Verify: inactive bounds strictly satisfied, inactive inequalities
    // nonpositive, active multipliers correctly signed, KKT improved.
    for i in 0..n {
        if fix_lo[i] || fix_hi[i] {
            continue;
        }
        if (ws.lb[i].is_finite() && x[i] < ws.lb[i])
            || (ws.ub[i].is_finite() && x[i] > ws.ub[i])
        {
            if debug {
                eprintln!("polish: revert (free variable {i} crossed its bound)");
            }
            return;
        }
    }
    let mut h_check = DVector::zeros(mi);
    if mi > 0 {
        program.ineq_constraints(&x, &mut h_check);
        for r in 0..mi {
            if !active_ineq.contains(&r) && h_check[r] > 1e-9 {
                return;
            }
        }
    }
    if nu_act.iter().any(|&v| v < -1e-7) {
        if debug {
            eprintln!("polish: revert (negative active-inequality multiplier)");
        }
        return;
    }

    let mut nu_full = DVector::zeros(mi);
    for (k, &r) in active_ineq.iter().enumerate() {
        nu_full[r] = nu_act[k].max(0.0);
    }
    let after = kkt_quality(program, ws, &x, &lambda, &nu_full);
    if debug {
        eprintln!("polish: after=({:.2e},{:.2e})", after.0, after.1);
    }
    if after.1 > before.1.max(1e-9) || after.0 > before.0.max(1e-7) {
        if debug {
            eprintln!("polish: revert (no KKT improvement)");
        }
        return;
    }

    // Rebuild bound duals from the polished gradient so the returned
    // multipliers satisfy stationarity with the snapped actives.
    ws.eval_all(program, &x);
    let mut r_stat = ws.grad.clone();
    if me > 0 {
        r_stat += ws.je.transpose() * &lambda;
    }
    if mi > 0 {
        r_stat += ws.ji.transpose() * &nu_full;
    }
    let mut zl = DVector::zeros(n);
    let mut zu = DVector::zeros(n);
    for i in 0..n {
        if fix_lo[i] {
            zl[i] = r_stat[i].max(0.0);
        } else if fix_hi[i] {
            zu[i] = (-r_stat[i]).max(0.0);
        }
    }

    sol.x = x;
    sol.eq_mult = lambda;
    sol.ineq_mult = nu_full;
    for r in 0..mi {
        sol.ineq_slack[r] = (-h_check[r]).max(0.0);
    }
    sol.z_lower = zl;
    sol.z_upper = zu;
}

/// (stationarity, feasibility) pair used to accept or reject the polish.
fn kkt_quality<P: NlpProgram + ?Sized>(
    program: &P,
    ws: &mut Workspace,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> (f64, f64) {
    ws.eval_all(program, x);
    let mut r = ws.grad.clone();
    if ws.me > 0 {
        r += ws.je.transpose() * lambda;
    }
    if ws.mi > 0 {
        r += ws.ji.transpose() * nu;
    }
    // Project out components explainable by active bounds.
    for i in 0..ws.n {
        let at_lo = ws.lb[i].is_finite() && (x[i] - ws.lb[i]).abs() <= 2e-5 * ws.lb[i].abs().max(1.0);
        let at_hi = ws.ub[i].is_finite() && (ws.ub[i] - x[i]).abs() <= 2e-5 * ws.ub[i].abs().max(1.0);
        if (at_lo && r[i] > 0.0) || (at_hi && r[i] < 0.0) {
            r[i] = 0.0;
        }
    }
    let feas = inf_norm(&ws.g) + ws.h.iter().fold(0.0f64, |a, &v| a.max(v)).max(0.0);
    (inf_norm(&r), feas)
}

/// Writes the spec'd verbose iteration log: `iter,merit,defect,step_norm`.
pub fn write_iteration_log<W: std::io::Write>(
    records: &[IterRecord],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "iter,merit,defect,step_norm")?;
    for r in records {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e}",
            r.iter, r.merit, r.eq_viol, r.step_norm
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x-3)², no constraints.
    struct Quad1D;
    impl NlpProgram for Quad1D {
        fn num_vars(&self) -> usize {
            1
        }
        fn num_eq(&self) -> usize {
            0
        }
        fn bounds(&self, _lb: &mut DVector<f64>, _ub: &mut DVector<f64>) {}
        fn objective(&self, x: &DVector<f64>) -> f64 {
            (x[0] - 3.0).powi(2)
        }
        fn gradient(&self, x: &DVector<f64>, g: &mut DVector<f64>) {
            g[0] = 2.0 * (x[0] - 3.0);
        }
        fn eq_constraints(&self, _x: &DVector<f64>, _c: &mut DVector<f64>) {}
        fn eq_jacobian(&self, _x: &DVector<f64>, _j: &mut DMatrix<f64>) {}
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            w: f64,
            _l: &DVector<f64>,
            _n: &DVector<f64>,
            h: &mut DMatrix<f64>,
        ) {
            h[(0, 0)] += 2.0 * w;
        }
        fn initial_guess(&self) -> DVector<f64> {
            DVector::from_element(1, -7.0)
        }
    }

    /// min (x-3)² with x <= 1: solution pinned at the bound.
    struct BoundedQuad;
    impl NlpProgram for BoundedQuad {
        fn num_vars(&self) -> usize {
            1
        }
        fn num_eq(&self) -> usize {
            0
        }
        fn bounds(&self, _lb: &mut DVector<f64>, ub: &mut DVector<f64>) {
            ub[0] = 1.0;
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            (x[0] - 3.0).powi(2)
        }
        fn gradient(&self, x: &DVector<f64>, g: &mut DVector<f64>) {
            g[0] = 2.0 * (x[0] - 3.0);
        }
        fn eq_constraints(&self, _x: &DVector<f64>, _c: &mut DVector<f64>) {}
        fn eq_jacobian(&self, _x: &DVector<f64>, _j: &mut DMatrix<f64>) {}
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            w: f64,
            _l: &DVector<f64>,
            _n: &DVector<f64>,
            h: &mut DMatrix<f64>,
        ) {
            h[(0, 0)] += 2.0 * w;
        }
        fn initial_guess(&self) -> DVector<f64> {
            DVector::from_element(1, 0.0)
        }
    }

    /// min x+y s.t. x+2y = 1, 0 <= x,y <= 1 — an LP whose optimum is a
    /// vertex (x=1, y=0) ... actually min on the segment: f = x+y with
    /// x = 1-2y: f = 1-y, minimized at y max = 0.5, x = 0. Solution (0, 0.5).
    struct BoxLp;
    impl NlpProgram for BoxLp {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn bounds(&self, lb: &mut DVector<f64>, ub: &mut DVector<f64>) {
            lb[0] = 0.0;
            lb[1] = 0.0;
            ub[0] = 1.0;
            ub[1] = 1.0;
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            x[0] + x[1]
        }
        fn gradient(&self, _x: &DVector<f64>, g: &mut DVector<f64>) {
            g[0] = 1.0;
            g[1] = 1.0;
        }
        fn eq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>) {
            c[0] = x[0] + 2.0 * x[1] - 1.0;
        }
        fn eq_jacobian(&self, _x: &DVector<f64>, j: &mut DMatrix<f64>) {
            j[(0, 0)] = 1.0;
            j[(0, 1)] = 2.0;
        }
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            _w: f64,
            _l: &DVector<f64>,
            _n: &DVector<f64>,
            _h: &mut DMatrix<f64>,
        ) {
        }
        fn initial_guess(&self) -> DVector<f64> {
            DVector::from_vec(vec![0.4, 0.3])
        }
    }

    /// Hock-Schittkowski 71.
    struct Hs071;
    impl NlpProgram for Hs071 {
        fn num_vars(&self) -> usize {
            4
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn bounds(&self, lb: &mut DVector<f64>, ub: &mut DVector<f64>) {
            for i in 0..4 {
                lb[i] = 1.0;
                ub[i] = 5.0;
            }
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            x[0] * x[3] * (x[0] + x[1] + x[2]) + x[2]
        }
        fn gradient(&self, x: &DVector<f64>, g: &mut DVector<f64>) {
            g[0] = x[3] * (2.0 * x[0] + x[1] + x[2]);
            g[1] = x[0] * x[3];
            g[2] = x[0] * x[3] + 1.0;
            g[3] = x[0] * (x[0] + x[1] + x[2]);
        }
        fn eq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>) {
            c[0] = x.iter().map(|v| v * v).sum::<f64>() - 40.0;
        }
        fn eq_jacobian(&self, x: &DVector<f64>, j: &mut DMatrix<f64>) {
            for i in 0..4 {
                j[(0, i)] = 2.0 * x[i];
            }
        }
        fn ineq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>) {
            c[0] = 25.0 - x[0] * x[1] * x[2] * x[3];
        }
        fn ineq_jacobian(&self, x: &DVector<f64>, j: &mut DMatrix<f64>) {
            j[(0, 0)] = -x[1] * x[2] * x[3];
            j[(0, 1)] = -x[0] * x[2] * x[3];
            j[(0, 2)] = -x[0] * x[1] * x[3];
            j[(0, 3)] = -x[0] * x[1] * x[2];
        }
        fn lagrangian_hessian(
            &self,
            x: &DVector<f64>,
            w: f64,
            l: &DVector<f64>,
            nu: &DVector<f64>,
            h: &mut DMatrix<f64>,
        ) {
            let mut add = |i: usize, j: usize, v: f64| {
                h[(i, j)] += v;
                if i != j {
                    h[(j, i)] += v;
                }
            };
            // objective
            add(0, 0, w * 2.0 * x[3]);
            add(0, 1, w * x[3]);
            add(0, 2, w * x[3]);
            add(0, 3, w * (2.0 * x[0] + x[1] + x[2]));
            add(1, 3, w * x[0]);
            add(2, 3, w * x[0]);
            // equality
            for i in 0..4 {
                add(i, i, 2.0 * l[0]);
            }
            // inequality
            add(0, 1, -nu[0] * x[2] * x[3]);
            add(0, 2, -nu[0] * x[1] * x[3]);
            add(0, 3, -nu[0] * x[1] * x[2]);
            add(1, 2, -nu[0] * x[0] * x[3]);
            add(1, 3, -nu[0] * x[0] * x[2]);
            add(2, 3, -nu[0] * x[0] * x[1]);
        }
        fn initial_guess(&self) -> DVector<f64> {
            DVector::from_vec(vec![1.0, 5.0, 5.0, 1.0])
        }
    }

    /// x pinned to 1 by an equality while the box forces x <= -1.
    struct Contradiction;
    impl NlpProgram for Contradiction {
        fn num_vars(&self) -> usize {
            1
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn bounds(&self, _lb: &mut DVector<f64>, ub: &mut DVector<f64>) {
            ub[0] = -1.0;
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            x[0]
        }
        fn gradient(&self, _x: &DVector<f64>, g: &mut DVector<f64>) {
            g[0] = 1.0;
        }
        fn eq_constraints(&self, x: &DVector<f64>, c: &mut DVector<f64>) {
            c[0] = x[0] - 1.0;
        }
        fn eq_jacobian(&self, _x: &DVector<f64>, j: &mut DMatrix<f64>) {
            j[(0, 0)] = 1.0;
        }
        fn lagrangian_hessian(
            &self,
            _x: &DVector<f64>,
            _w: f64,
            _l: &DVector<f64>,
            _n: &DVector<f64>,
            _h: &mut DMatrix<f64>,
        ) {
        }
        fn initial_guess(&self) -> DVector<f64> {
            DVector::from_element(1, -2.0)
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let (sol, rep) = solve_nlp(&Quad1D, &SolverConfig::default(), None);
        assert!(rep.status.is_converged(), "{rep:?}");
        assert!((sol.x[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn bound_becomes_active_and_polished_exact() {
        let (sol, rep) = solve_nlp(&BoundedQuad, &SolverConfig::default(), None);
        assert!(rep.status.is_converged(), "{rep:?}");
        // The crossover polish should land exactly on the bound.
        assert_eq!(sol.x[0], 1.0);
        assert!(rep.max_bound_violation <= 1e-12);
    }

    #[test]
    fn lp_vertex() {
        let (sol, rep) = solve_nlp(&BoxLp, &SolverConfig::default(), None);
        assert!(rep.status.is_converged(), "{rep:?}");
        assert!((sol.x[0] - 0.0).abs() < 1e-7, "x = {}", sol.x[0]);
        assert!((sol.x[1] - 0.5).abs() < 1e-7, "y = {}", sol.x[1]);
        assert!((rep.objective - 0.5).abs() < 1e-7);
    }

    #[test]
    fn hs071_reference_solution() {
        let (sol, rep) = solve_nlp(&Hs071, &SolverConfig::default(), None);
        assert!(rep.status.is_converged(), "{rep:?}");
        let expected = [1.0, 4.742_999_64, 3.821_149_98, 1.379_408_29];
        for (got, want) in sol.x.iter().zip(expected) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        assert!((rep.objective - 17.014_017_3).abs() < 1e-5);
        assert!(rep.max_defect <= 1e-9);
        assert!(rep.max_bound_violation <= 1e-8);
    }

    #[test]
    fn warm_start_is_a_fixed_point() {
        let cfg = SolverConfig::default();
        let (sol, rep) = solve_nlp(&Hs071, &cfg, None);
        assert!(rep.status.is_converged());
        let (sol2, rep2) = solve_nlp(&Hs071, &cfg, Some(&sol));
        assert!(rep2.status.is_converged());
        assert!(rep2.iterations <= 2, "warm start took {}", rep2.iterations);
        assert!((rep2.objective - rep.objective).abs() <= 1e-8);
        assert!((sol2.x - &sol.x).amax() <= 1e-7);
    }

    #[test]
    fn contradiction_reported_infeasible() {
        let (_, rep) = solve_nlp(&Contradiction, &SolverConfig::default(), None);
        assert_eq!(rep.status, SolveStatus::Infeasible);
    }

    #[test]
    fn merit_never_increases_within_accepted_iterations() {
        let (_, rep) = solve_nlp(&Hs071, &SolverConfig::default(), None);
        for r in &rep.iterations_log {
            assert!(
                r.merit <= r.merit_pre + 1e-12,
                "iter {}: merit rose {} -> {}",
                r.iter,
                r.merit_pre,
                r.merit
            );
        }
    }

    #[test]
    fn iteration_log_csv_shape() {
        let (_, rep) = solve_nlp(&Hs071, &SolverConfig::default(), None);
        let mut buf = Vec::new();
        write_iteration_log(&rep.iterations_log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iter,merit,defect,step_norm"));
        assert_eq!(lines.count(), rep.iterations_log.len());
    }
}
