//! Batch planning: solve the transcribed landing problem and unpack the
//! demonstration trajectory, plus the two-model fuel comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, Trajectory};
use crate::trajopt::nlp::{solve_nlp, NlpSolution, SolveReport, SolverConfig};
use crate::trajopt::problem::LandingProblem;
use crate::trajopt::transcribe::{transcribe, NlpProblem};

/// A converged batch plan: the demonstration trajectory, the solver
/// report, and the primal-dual point for warm starts.
#[derive(Debug, Clone)]
pub struct Plan {
    pub trajectory: Trajectory,
    pub report: SolveReport,
    pub warm: NlpSolution,
}

/// Solves the transcribed problem and refines the report to natural units.
pub fn solve_landing(
    problem: &LandingProblem,
    config: &SolverConfig,
    warm: Option<&NlpSolution>,
) -> Result<(NlpProblem, NlpSolution, SolveReport)> {
    let nlp = transcribe(problem)?;
    let (solution, mut report) = solve_nlp(&nlp, config, warm);
    nlp.refine_report(&solution.x, &mut report);
    Ok((nlp, solution, report))
}

/// Plans the fuel-optimal demonstration trajectory tau*.
///
/// Fails with [`Error::SolveFailed`] when the solver does not converge;
/// the report inside the error still describes the attempt.
pub fn plan_demonstration(problem: &LandingProblem, config: &SolverConfig) -> Result<Plan> {
    let (nlp, solution, report) = solve_landing(problem, config, None)?;
    if !report.status.is_converged() {
        return Err(Error::SolveFailed {
            status: report.status,
            report: Box::new(report),
        });
    }
    let (states, inputs) = nlp.unpack(&solution.x);
    let trajectory = Trajectory::new(problem.model_kind, problem.params.dt, states, inputs)?;
    Ok(Plan {
        trajectory,
        report,
        warm: solution,
    })
}

/// Fuel comparison between the TVC-only and grid-fin plans of one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tvc_report: SolveReport,
    pub gridfin_report: SolveReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tvc_plan: Option<Trajectory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gridfin_plan: Option<Trajectory>,
    /// Propellant available at start [kg].
    pub carried_fuel_kg: f64,
    pub tvc_fuel_kg: Option<f64>,
    pub gridfin_fuel_kg: Option<f64>,
    /// `(tvc - gridfin) / carried`, in percent.
    pub savings_pct_of_carried: Option<f64>,
    /// False when either model failed to converge.
    pub complete: bool,
}

/// Plans both model variants of the same scenario and reports the fuel
/// saving of the grid-fin model relative to carried propellant.
pub fn compare_models(problem: &LandingProblem, config: &SolverConfig) -> Result<ComparisonReport> {
    let mut tvc_problem = problem.clone();
    tvc_problem.model_kind = ModelKind::Tvc;
    let mut gf_problem = problem.clone();
    gf_problem.model_kind = ModelKind::GridFin;

    let run = |p: &LandingProblem| -> Result<(Option<Trajectory>, SolveReport)> {
        let (nlp, sol, report) = solve_landing(p, config, None)?;
        if report.status.is_converged() {
            let (states, inputs) = nlp.unpack(&sol.x);
            let traj = Trajectory::new(p.model_kind, p.params.dt, states, inputs)?;
            Ok((Some(traj), report))
        } else {
            Ok((None, report))
        }
    };

    let (tvc_plan, tvc_report) = run(&tvc_problem)?;
    let (gridfin_plan, gridfin_report) = run(&gf_problem)?;

    let carried = problem.x0.mass - problem.params.dry_mass;
    let tvc_fuel = tvc_plan.as_ref().map(crate::model::fuel_burned);
    let gridfin_fuel = gridfin_plan.as_ref().map(crate::model::fuel_burned);
    let savings = match (tvc_fuel, gridfin_fuel) {
        (Some(t), Some(g)) if carried > 0.0 => Some((t - g) / carried * 100.0),
        _ => None,
    };
    let complete = tvc_plan.is_some() && gridfin_plan.is_some();
    Ok(ComparisonReport {
        tvc_report,
        gridfin_report,
        tvc_plan,
        gridfin_plan,
        carried_fuel_kg: carried,
        tvc_fuel_kg: tvc_fuel,
        gridfin_fuel_kg: gridfin_fuel,
        savings_pct_of_carried: savings,
        complete,
    })
}
