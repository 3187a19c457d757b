use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // Tensor engine.
    #[error("leaf `{0}` has no binding")]
    UnboundLeaf(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteResult(String),
    #[error("unknown parameter `{0}`")]
    UnknownName(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // Images and patches.
    #[error("image has no pixels")]
    EmptyImage,
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannelCount(usize),
    #[error("patch size {patch} does not divide image extent {extent}")]
    IndivisiblePatchSize { patch: usize, extent: usize },

    // Vision graphs.
    #[error("k = {k} needs 1 ≤ k < n = {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("adjacency is not symmetric at ({0}, {1})")]
    AsymmetricInput(usize, usize),
    #[error("node {0} has zero degree")]
    ZeroDegreeNode(usize),

    // ODE solver.
    #[error("ODE state became non-finite at t = {0}")]
    NonFiniteState(f64),
    #[error("interpolation nodes are not distinct")]
    DegenerateNodes,
    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    // Text path.
    #[error("category name is empty")]
    EmptyCategoryName,
    #[error("fixture has no response for category `{category}`, prompt {prompt_id}")]
    FixtureMiss { category: String, prompt_id: u8 },
    #[error("LLM transport error: {0}")]
    TransportError(String),
    #[error("text corpus is empty")]
    EmptyCorpus,
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("text knowledge bank is incomplete: {0}")]
    IncompleteBank(String),

    // Harness.
    #[error("category directory {0} holds no images")]
    EmptyCategory(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },
    #[error("too few items: {0}")]
    TooFewItems(String),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter `{param}`)")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param: String,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint incompatible with configuration: {0}")]
    IncompatibleConfig(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("gradient check failed: {0}")]
    GradientCheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
