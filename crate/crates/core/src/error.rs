use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the public operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension must be a power of two, got {0}x{1}")]
    NonPowerOfTwo(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate field: all values equal, mask would be arbitrary")]
    DegenerateField,
    #[error("mask popcount target k={0} is out of range for a {1}x{2} grid")]
    InvalidPopcount(usize, usize, usize),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("forward cache does not match these parameters/input")]
    CacheMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("source and target pair members must be distinct within a quadruple")]
    InvalidPairing,
    #[error("unknown variant: {0}")]
    UnknownVariant(String),
    #[error("unknown mask baseline: {0}")]
    UnknownBaseline(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unexpected gray level {0} in label/mask file")]
    Value(u8),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
