use std::path::PathBuf;

use mvrelight_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("overlapping light markers: edits {first} and {second}")]
    Overlap { first: usize, second: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("dataset version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("missing file for scene {scene}, camera {camera}, {what}: {path}")]
    Missing { scene: String, camera: usize, what: String, path: PathBuf },
    #[error("image: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {step}: l_lbm={l_lbm}, l_pix0={l_pix0}, l_pix1={l_pix1}")]
    NonFinite { step: usize, l_lbm: f64, l_pix0: f64, l_pix1: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
