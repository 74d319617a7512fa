use std::path::PathBuf;

use thiserror::Error;

use crate::model::{OperationalMode, StageLabel};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {0} does not belong to the surface taxonomy")]
    WrongTaxonomy(StageLabel),

    #[error("labels from both surface and sub-surface taxonomies in one set")]
    MixedTaxonomy,

    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame {frame_id}: detector expects {expected} frames, got {actual}")]
    ModeMismatch {
        frame_id: u64,
        expected: OperationalMode,
        actual: OperationalMode,
    },

    #[error("frame {0}: no image available for the reference detector")]
    MissingImage(u64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no ground-truth instances of {0}")]
    NoTruth(StageLabel),

    #[error("no pairable points within {tolerance_s} s")]
    NoPairs { tolerance_s: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("illegal mode transition {from} -> {to}")]
    IllegalTransition { from: OperationalMode, to: OperationalMode },

    #[error("unknown unit {0}")]
    UnknownUnit(String),

    #[error("unknown tank {0}")]
    UnknownTank(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("annotation: {0}")]
    Annotation(String),

    #[error("label file {path}:{line}: {reason}")]
    LabelFormat { path: PathBuf, line: usize, reason: String },

    #[error("storage fault at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
