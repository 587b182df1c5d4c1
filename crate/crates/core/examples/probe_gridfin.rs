//! Dev probe: inspect the grid-fin batch stall.
use nalgebra::{DMatrix, DVector};
use toped::trajopt::{solve_landing, LandingProblem, NlpProgram, SolverConfig, TerminalSpec};
use toped::{ModelKind, ModelParams, RocketState};

fn main() {
    let problem = LandingProblem {
        model_kind: ModelKind::GridFin,
        params: ModelParams::default(),
        x0: RocketState::new(2000.0, 165.0, 1000.0, -10.0, -80.0, 0.1, 0.0),
        horizon: 20,
        terminal: TerminalSpec::default(),
    };
    let mut cfg = SolverConfig::default();
    cfg.infeasibility_detection = false;
    cfg.max_iter = 900;
    let (nlp, sol, report) = solve_landing(&problem, &cfg, None).unwrap();
    println!("status {:?} iters {} defect {:.2e} stat {:.2e}", report.status, report.iterations, report.max_defect, report.stationarity);

    let n = nlp.num_vars();
    let me = nlp.num_eq();
    let mut grad = DVector::zeros(n);
    nlp.gradient(&sol.x, &mut grad);
    let mut je = DMatrix::zeros(me, n);
    nlp.eq_jacobian(&sol.x, &mut je);
    let r = &grad + je.transpose() * &sol.eq_mult - &sol.z_lower + &sol.z_upper;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| r[b].abs().total_cmp(&r[a].abs()));
    let ns = 7 * 21;
    println!("worst dual-residual components:");
    for &i in idx.iter().take(10) {
        let desc = if i < ns {
            format!("state stage {} comp {}", i / 7, i % 7)
        } else if i < ns + 3 * 20 {
            let j = i - ns;
            format!("input stage {} chan {}", j / 3, j % 3)
        } else {
            format!("slack {}", i - ns - 60)
        };
        println!(
            "  {desc:26} r={:+.3e} grad={:+.2e} zl={:.2e} zu={:.2e} x={:+.5e}",
            r[i], grad[i], sol.z_lower[i], sol.z_upper[i], sol.x[i]
        );
    }
}
