use thiserror::Error;

/// Errors produced by the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("shape {shape:?} implies {expected} elements but {actual} were given")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("calibration stream is empty")]
    EmptyCalibration,

    #[error("empty value group")]
    EmptyGroup,

    #[error("missing range for layer {layer} group {group}")]
    MissingRange { layer: String, group: usize },

    #[error("ratio {ratio} is not representable in whole groups (total {total}); nearest: {lower} or {upper}")]
    UnrepresentableRatio {
        ratio: f64,
        total: usize,
        lower: f64,
        upper: f64,
    },

    #[error("ratio {requested} was not prepared; available: {available:?}")]
    UnpreparedRatio { requested: f64, available: Vec<f64> },

    #[error("max_4bit_ch {value} is not aligned to a group boundary of layer {layer}")]
    UnalignedBoundary { layer: String, value: usize },

    #[error("selections are not inclusive: ratio {lower} selects a group that ratio {higher} drops")]
    NonInclusive { lower: f64, higher: f64 },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("network is not prepared for {0}")]
    NotPrepared(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("missing {artifact}; run `{stage}` first")]
    MissingArtifact { artifact: String, stage: &'static str },

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
