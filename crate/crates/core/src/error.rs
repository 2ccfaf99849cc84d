use std::path::PathBuf;

/// Errors raised anywhere in the distillation pipeline.
///
/// Variants are grouped so that front ends can map them onto a small set of
/// exit classes: configuration, I/O and format, numeric, and compatibility.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },

    #[error("unknown class {0}")]
    UnknownClass(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
