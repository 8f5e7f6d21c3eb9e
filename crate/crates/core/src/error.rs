use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity was produced; `op` names the operation that produced it.
    #[error("numeric failure in `{op}`: {detail}")]
    NumericFailure { op: &'static str, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Wav(#[from] WavError),

    #[error(transparent)]
    MaskFile(#[from] MaskFileError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed wav header: {0}")]
    MalformedHeader(String),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("expected mono audio, found {0} channels")]
    NotMono(u16),
}

#[derive(Debug, Error)]
pub enum MaskFileError {
    #[error("malformed mask file at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("bad logits sidecar: {0}")]
    BadSidecar(String),
}
