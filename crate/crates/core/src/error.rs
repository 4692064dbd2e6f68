use thiserror::Error;

use crate::memory::MemoryFootprint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid device description: {0}")]
    InvalidDevice(String),

    #[error("invalid cluster: {0}")]
    InvalidCluster(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parallelism config: {0}")]
    InvalidParallelism(String),

    #[error("unknown precision `{0}`")]
    UnknownPrecision(String),

    #[error("unknown technology node `{0}`")]
    UnknownNode(String),

    #[error("unknown preset `{name}` ({kind})")]
    UnknownPreset { kind: &'static str, name: String },

    #[error("invalid design point: {0}")]
    InvalidDesignPoint(String),

    #[error("shape exceeds addressable size: {0}")]
    ShapeTooLarge(String),

    #[error("communication group spans intra- and inter-node scopes: {0}")]
    MixedScope(String),

    #[error(
        "memory overflow: need {} bytes, device has {capacity} bytes",
        footprint.total
    )]
    MemoryOverflow {
        footprint: MemoryFootprint,
        capacity: u64,
    },

    #[error("recompute plan invalid: {0}")]
    InvalidRecompute(String),

    #[error("search failed: {0}")]
    Search(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("fixture error: {0}")]
    Fixture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
