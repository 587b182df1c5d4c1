//! Dev probe: does the nominal batch problem converge?
use toped::trajopt::{plan_demonstration, LandingProblem, SolverConfig, TerminalSpec};
use toped::{fuel_burned, ModelKind, ModelParams, RocketState};

fn main() {
    for kind in [ModelKind::Tvc, ModelKind::GridFin] {
        let problem = LandingProblem {
            model_kind: kind,
            params: ModelParams::default(),
            x0: RocketState::new(2000.0, 165.0, 1000.0, -10.0, -80.0, 0.1, 0.0),
            horizon: 20,
            terminal: TerminalSpec::default(),
        };
        let t0 = std::time::Instant::now();
        match plan_demonstration(&problem, &SolverConfig::default()) {
            Ok(plan) => {
                let f = plan.trajectory.final_state();
                println!(
                    "{kind}: CONVERGED iters={} fuel={:.3} kg defect={:.2e} viol={:.2e} stat={:.2e} final=({:.3},{:.3},vx={:.3},vy={:.3},th={:.4},om={:.4}) t={:.2}s",
                    plan.report.iterations,
                    fuel_burned(&plan.trajectory),
                    plan.report.max_defect,
                    plan.report.max_bound_violation,
                    plan.report.stationarity,
                    f.x, f.y, f.vx, f.vy, f.theta, f.omega,
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => {
                println!("{kind}: FAILED after {:.2}s: {e}", t0.elapsed().as_secs_f64());
                if let toped::Error::SolveFailed { report, .. } = e {
                    println!("  iters={} defect={:.2e} stat={:.2e}", report.iterations, report.max_defect, report.stationarity);
                    for r in report.iterations_log.iter().rev().take(8) {
                        println!("  it {} mu={:.1e} merit={:.4e} eq={:.2e} step={:.2e} alpha={:.2e} reg={:.1e}",
                            r.iter, r.mu, r.merit, r.eq_viol, r.step_norm, r.alpha, r.reg);
                    }
                }
            }
        }
    }
}
