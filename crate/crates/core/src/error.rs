use thiserror::Error;

use crate::volume::Point3;

/// Errors raised by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("point {point:?} is covered by no image")]
    Uncovered { point: Point3 },

    #[error("degenerate prior at voxel {voxel}: every label has zero prior weight")]
    DegeneratePrior { voxel: usize },

    #[error("degenerate atlas: label {label} has zero total prior mass")]
    DegenerateAtlas { label: u16 },

    #[error("empty domain: no voxel of the common lattice is covered by any image")]
    EmptyDomain,

    #[error("zero likelihood at voxel {voxel} (index {ijk:?}): {detail}")]
    ZeroLikelihood {
        voxel: usize,
        ijk: [usize; 3],
        detail: String,
    },

    #[error("non-finite gradient in parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numerical procedures (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegeneratePrior { .. }
                | Error::ZeroLikelihood { .. }
                | Error::NonFiniteGradient { .. }
                | Error::EmptyDomain
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
