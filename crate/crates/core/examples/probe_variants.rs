//! Dev probe: grid-fin stall isolation experiments.
use toped::trajopt::{solve_landing, LandingProblem, SolverConfig, TerminalSpec};
use toped::{Bound, ModelKind, ModelParams, RocketState};

fn run(tag: &str, problem: &LandingProblem, cfg: &SolverConfig) {
    let t0 = std::time::Instant::now();
    let (_nlp, _sol, report) = solve_landing(problem, cfg, None).unwrap();
    println!(
        "{tag}: {:?} iters={} defect={:.2e} stat={:.2e} obj={:.3} t={:.2}s",
        report.status, report.iterations, report.max_defect, report.stationarity,
        report.objective, t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let base = LandingProblem {
        model_kind: ModelKind::GridFin,
        params: ModelParams::default(),
        x0: RocketState::new(2000.0, 165.0, 1000.0, -10.0, -80.0, 0.1, 0.0),
        horizon: 20,
        terminal: TerminalSpec::default(),
    };
    let mut cfg = SolverConfig::default();
    cfg.infeasibility_detection = false;
    cfg.max_iter = 300;

    run("baseline           ", &base, &cfg);

    let mut c2 = cfg.clone();
    c2.mu_init = 1e-2;
    run("mu_init=1e-2       ", &base, &c2);

    let mut p3 = base.clone();
    p3.params.input_bounds.fin_coeff = Bound::new(0.995, 1.0);
    run("gamma in [.995,1]  ", &p3, &cfg);

    let mut p4 = base.clone();
    p4.params.fin_area = 0.5;
    run("fin_area=0.5       ", &p4, &cfg);

    let mut c5 = cfg.clone();
    c5.mu_init = 1e-3;
    run("mu_init=1e-3       ", &base, &c5);
}
