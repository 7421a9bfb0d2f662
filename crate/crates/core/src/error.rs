use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid axes: {0}")]
    InvalidAxes(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point is behind the camera (depth {depth} <= near plane {near})")]
    BehindCamera { depth: f64, near: f64 },
    #[error("invalid depth {depth} at camera {camera}, pixel (u={u}, v={v})")]
    InvalidDepth {
        camera: usize,
        u: usize,
        v: usize,
        depth: f64,
    },
    #[error("invalid rotation: zero-norm quaternion")]
    InvalidRotation,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image {width}x{height} is smaller than the minimum {min}x{min}")]
    Size {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("temporal order error: record at t={record} is newer than the current time t={current}")]
    TemporalOrder { record: f64, current: f64 },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
