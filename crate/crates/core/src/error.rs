use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output would have zero size ({detail})")]
    ZeroSizeOutput { op: &'static str, detail: String },

    #[error("{op}: spatial dims {h}x{w} not divisible by {by}")]
    Indivisible {
        op: &'static str,
        h: usize,
        w: usize,
        by: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown variant `{name}` (valid: {valid})")]
    UnknownVariant { name: String, valid: String },

    #[error("{op}: input is not binary (found {value})")]
    NotBinary { op: &'static str, value: f64 },

    #[error("relative area difference undefined for an empty label")]
    EmptyLabel,

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("phantom placement failed: {0}")]
    Geometry(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
