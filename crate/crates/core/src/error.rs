use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Workflow stage, attached to errors raised by `run_workflow`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Parse,
    Refine,
    SteadyState,
    BuildNlp,
    Solve,
    ExtractControls,
    Simulate,
    Validate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Parse => "parse",
            Stage::Refine => "refine",
            Stage::SteadyState => "steady-state",
            Stage::BuildNlp => "build-nlp",
            Stage::Solve => "solve",
            Stage::ExtractControls => "extract-controls",
            Stage::Simulate => "simulate",
            Stage::Validate => "validate",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u32 },

    #[error("edge {edge} references unknown node {node}")]
    UnknownNode { edge: u32, node: u32 },

    #[error("actuator references unknown edge {edge}")]
    UnknownEdge { edge: u32 },

    #[error("network graph is not connected")]
    Disconnected,

    #[error("supply node {supply} is listed after withdrawal node {withdrawal}")]
    NodeOrder { supply: u32, withdrawal: u32 },

    #[error("{kind} ids are not in increasing order at id {id}")]
    IdOrder { kind: &'static str, id: u32 },

    #[error("nonpositive {what} on edge {edge}: {value}")]
    NonPositiveParameter { edge: u32, what: &'static str, value: f64 },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("ratio {value} of actuator {actuator} is below 1")]
    RatioBelowOne { actuator: usize, value: f64 },

    #[error("zero total density at withdrawal node index {node}")]
    ZeroDensity { node: usize },

    #[error("nonpositive outlet density {value} on edge index {edge}")]
    NonPositiveOutletDensity { edge: usize, value: f64 },

    #[error("singular mass matrix: withdrawal node index {node} has no incoming edge")]
    SingularMassMatrix { node: usize },

    #[error("Newton iteration did not converge after {iterations} iterations (scaled residual {residual:e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },

    #[error("infeasible boundary data: {0}")]
    InfeasibleBoundary(String),

    #[error("concentration is not uniform across the network (values {first} and {other})")]
    NonUniformConcentration { first: f64, other: f64 },

    #[error("step size collapsed at t = {time} s (h = {step:e})")]
    StepSizeCollapse { time: f64, step: f64 },

    #[error("nonpositive total density at t = {time} s, withdrawal node index {node}")]
    DensityNonPositive { time: f64, node: usize },

    #[error("at least 2 time steps are required, got {0}")]
    TooFewTimeSteps(usize),

    #[error("profile period {found} s does not match the horizon {expected} s")]
    PeriodMismatch { expected: f64, found: f64 },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("zero total density in momentum row (edge index {edge}, time index {time_index})")]
    MomentumRowDensity { edge: usize, time_index: usize },

    #[error("vanishing pointwise mean in series {index} at t = {time} s")]
    VanishingMean { index: usize, time: f64 },

    #[error("solver stopped with status {status} after {iterations} iterations")]
    SolverFailed { status: String, iterations: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at(self, stage: Stage) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stage tag if this error came out of the workflow.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
