use thiserror::Error;

/// Errors produced by the attack, density and watermark machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("no class-{class} samples inside the query ball")]
    EmptyNeighborhood { class: usize },
    #[error("class {class} has {available} usable samples, {required} required")]
    InsufficientSamples {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("vector {0} has zero norm; cosine similarity undefined")]
    ZeroVector(usize),
    #[error("every sample in the batch was dropped (source class equals target)")]
    EmptyBatch,
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("message capacity exceeded: {requested} messages requested, 2^{bits} available")]
    CapacityExceeded { requested: u128, bits: usize },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
