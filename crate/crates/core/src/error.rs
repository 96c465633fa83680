use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: input has {got} channels but parameters expect {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid tensor shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 4]),
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    #[error("2x2 max pooling needs even spatial dims, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },
    #[error("batch normalization in train mode needs at least 2 values per channel, got {0}")]
    EmptyBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("channel count {channels} is not divisible by {divisor}")]
    ChannelsNotDivisible { channels: usize, divisor: usize },
    #[error("strand kernel length {kernel} exceeds strand length {channels}")]
    StrandTooLong { kernel: usize, channels: usize },
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint fingerprint {found:#018x} does not match architecture {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("function value is not finite")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
