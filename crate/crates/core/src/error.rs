use thiserror::Error;

use crate::road_network::{IntersectionId, LaneId, PhaseId};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid lane parameter `{field}`: must be positive")]
    InvalidLaneParam { field: &'static str },
    #[error("invalid grid dimension `{field}`: must be at least 1")]
    InvalidDimension { field: &'static str },
    #[error("unknown intersection {0}")]
    UnknownIntersection(IntersectionId),
    #[error("unknown lane {0}")]
    UnknownLane(LaneId),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("unsupported network file version {0}")]
    UnsupportedVersion(u32),
    #[error("network file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid flow parameter: {0}")]
    InvalidParameter(String),
    #[error("intersection {intersection}: unknown phase id {phase}")]
    UnknownPhase { intersection: IntersectionId, phase: PhaseId },
    #[error("signal map covers {got} intersections, network has {expected}")]
    SignalCount { got: usize, expected: usize },
    #[error("simulation integrity: {0}")]
    Integrity(String),
    #[error("flow file line {line}: {msg}")]
    FlowFormat { line: usize, msg: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("n_missing {n_missing} must be below the intersection count {total}")]
    TooManyMissing { n_missing: usize, total: usize },
    #[error("could not satisfy the adjacency constraint (allow_adjacent = {allow_adjacent}) for {n_missing} missing intersections after {attempts} attempts")]
    Infeasible { n_missing: usize, allow_adjacent: bool, attempts: usize },
    #[error("intersection {0} is observed; the neighbor view is only defined for unobserved intersections")]
    Misuse(IntersectionId),
    #[error("mask references unknown intersection {0}")]
    UnknownIntersection(IntersectionId),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer sizes must list at least two layers, got {0}")]
    TooFewLayers(usize),
    #[error("layer {0} has zero width")]
    ZeroWidth(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss or gradient")]
    Divergence,
    #[error("learning rate must be non-negative and finite")]
    InvalidLearningRate,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("no observed neighbors to impute from")]
    Unavailable,
    #[error("empty pretraining dataset")]
    EmptyDataset,
    #[error("reward model diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("dataset file line {line}: {msg}")]
    DatasetFormat { line: usize, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("no experiences match the requested source")]
    NoMatchingSource,
    #[error("empty batch")]
    EmptyBatch,
    #[error("Q-learning target is not finite")]
    Divergence,
    #[error("candidate durations must be non-empty and positive")]
    InvalidCandidates,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("config format: {0}")]
    Format(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
