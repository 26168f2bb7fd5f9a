use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid layer range: from {from} to {to}")]
    LayerRange { from: String, to: String },

    #[error("relaxation parameters do not match the network: {0}")]
    ParamShape(String),

    #[error("neuron ({layer}, {neuron}) cannot be split: {reason}")]
    NotSplittable {
        layer: usize,
        neuron: usize,
        reason: &'static str,
    },

    #[error("total sample weight is zero")]
    ZeroWeight,

    #[error("unknown heuristic `{0}`")]
    UnknownHeuristic(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
