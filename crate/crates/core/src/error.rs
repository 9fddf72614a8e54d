use std::path::PathBuf;

use thiserror::Error;
use viscosurr_tensorad::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("invalid material: {0}")]
    Material(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("element {element} inverted at t = {time:.6} s (det F = {det:.3e})")]
    ElementInversion { element: usize, time: f64, det: f64 },
    #[error("non-finite value in {context} at t = {time:.6} s")]
    NonFinite { context: &'static str, time: f64 },
    #[error("scenario generation gave up on sequence {sequence} after {attempts} attempts: {last}")]
    ScenarioRejected { sequence: usize, attempts: usize, last: String },
    #[error("training aborted at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unsupported container version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Contract { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
