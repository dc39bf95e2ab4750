use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("view {view}: {message}")]
    InvalidView { view: usize, message: String },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("mesh: {0}")]
    Mesh(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing forward intermediates: {0}")]
    MissingForward(String),

    #[error("non-finite gradient in {group} at splat {index}")]
    NonFiniteGradient { group: &'static str, index: usize },

    #[error("training diverged at iteration {iteration} (loss {loss}){}", dump_note(.dump))]
    Diverged {
        iteration: usize,
        loss: f64,
        dump: Option<PathBuf>,
    },

    #[error("no splat reaches confidence {p_ex} for object {target_id} (max observed {max_confidence:.4})")]
    EmptyTarget {
        target_id: u8,
        p_ex: f64,
        max_confidence: f64,
    },

    #[error("model too small: {0}")]
    ModelTooSmall(String),

    #[error("no evaluable ids")]
    NoEvaluableIds,

    #[error("empty fused surface: {0}")]
    EmptySurface(String),

    #[error("codec/denoiser failure: {0}")]
    Diffusion(String),

    #[error("inpaint service: {0}")]
    Service(String),

    #[error("inpaint protocol violation: {0}")]
    Protocol(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

fn dump_note(dump: &Option<PathBuf>) -> String {
    match dump {
        Some(p) => format!("; state dumped to {}", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
