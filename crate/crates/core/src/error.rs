use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdnError {
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("step called on a terminated episode")]
    SteppedAfterDone,
    #[error("object {0} is not visible from the given pose")]
    NotVisible(u32),
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },
    #[error("requested {requested} demands but the universe has {available}")]
    InsufficientDemands { requested: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no negatives of type {0} exist in this universe")]
    InsufficientNegatives(u8),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("training diverged at step {step}: loss {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("no path to any goal state")]
    NoPath,
    #[error("demand {demand} has no satisfying object in scene {scene}")]
    NoSatisfier { demand: u32, scene: u64 },
    #[error("split {0} has no episodes")]
    EmptySplit(String),
    #[error("missing results: {0}")]
    MissingResults(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] ddn_nn::NnError),
}

pub type Result<T, E = DdnError> = std::result::Result<T, E>;
