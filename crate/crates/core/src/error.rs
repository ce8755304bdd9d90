//! Crate-level error type and its mapping to process exit codes.

use thiserror::Error;

use crate::body::BodyError;
use crate::config::ConfigError;
use crate::diffcore::DiffError;
use crate::geometry::GeometryError;
use crate::image::ImageError;
use crate::synthcap::SynthError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{what} is {got:?}, expected {want:?}")]
    Dimension {
        what: &'static str,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Diff(_) => 3,
            _ => 2,
        }
    }
}
