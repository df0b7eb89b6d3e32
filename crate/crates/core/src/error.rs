// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by dlens.
#[derive(Debug, thiserror::Error)]
pub enum DlensError {
    /// Two tensors (or a tensor and a declared shape) disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An index (layer, head, direction, token id, ...) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A tensor required by the loader is absent from the archive.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    /// Malformed archive, header or sidecar.
    #[error("malformed archive: {0}")]
    Format(String),

    /// Checksum in a manifest does not match the archive contents.
    #[error("checksum mismatch for `{name}`: manifest {expected}, archive {actual}")]
    Checksum {
        name: String,
        expected: String,
        actual: String,
    },

    /// Iterative algorithm failed to converge.
    #[error("no convergence: {0}")]
    Convergence(String),

    /// Training diverged (loss became NaN).
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A statistic was requested over an empty population.
    #[error("empty class: {0}")]
    EmptyClass(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DlensError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DlensError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DlensError::Shape(_)
                | DlensError::Index(_)
                | DlensError::Invalid(_)
                | DlensError::MissingTensor(_)
                | DlensError::Format(_)
                | DlensError::Checksum { .. }
                | DlensError::EmptyClass(_)
                | DlensError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DlensError>;
