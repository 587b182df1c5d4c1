//! Direct transcription of the fuel-minimal landing problem into a
//! constrained NLP, an interior-point solver for it, and the batch planner
//! that produces demonstration trajectories.

pub mod nlp;
pub mod plan;
pub mod problem;
pub mod transcribe;

pub use nlp::{
    solve_nlp, IterRecord, NlpProgram, NlpSolution, SolveReport, SolveStatus, SolverConfig,
};
pub use plan::{compare_models, plan_demonstration, solve_landing, ComparisonReport, Plan};
pub use problem::{LandingProblem, TerminalSpec};
pub use transcribe::{
    transcribe, NlpProblem, ObjectiveKind, SlackChannel, SlackSpec, TerminalConstraint,
};
