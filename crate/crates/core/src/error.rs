use std::path::PathBuf;

use thiserror::Error;

use crate::attribution::FormatError;

pub type Result<T> = std::result::Result<T, FocusError>;

#[derive(Debug, Error)]
pub enum FocusError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("image error for {what}: {source}")]
    Image {
        what: String,
        #[source]
        source: image::ImageError,
    },
    #[error("attribution file {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("class {0:?} has no images")]
    EmptyClass(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("no eval samples for class {0:?}")]
    NoEvalSamples(String),
    #[error("classes with fewer than 2 eligible eval images: {}", .0.join(", "))]
    InsufficientImages(Vec<String>),
    #[error("invalid mosaic: {0}")]
    InvalidMosaic(String),
    #[error("dimension mismatch: map is {found_w}x{found_h}, mosaic is {expected_w}x{expected_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("non-finite relevance at index {0}")]
    NonFinite(usize),
    #[error("empty distribution: no defined focus values")]
    EmptyDistribution,
    #[error("degenerate sample: all values equal or fewer than two values; use the histogram")]
    Degenerate,
    #[error("incomparable runs: {0}")]
    Incomparable(String),
    #[error("missing layout run(s): {}", .0.join(", "))]
    MissingLayoutRun(Vec<String>),
    #[error("explainer failed with exit code {code:?}; stderr tail:\n{stderr_tail}")]
    ExplainerFailed {
        code: Option<i32>,
        stderr_tail: String,
    },
    #[error("explainer timed out after {0:.1}s")]
    ExplainerTimeout(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl FocusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FocusError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        FocusError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        FocusError::Csv {
            path: path.into(),
            source,
        }
    }
}
