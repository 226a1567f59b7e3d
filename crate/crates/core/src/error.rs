use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error at layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("decode error in {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("sample rate mismatch: clip is {found} Hz, configuration expects {expected} Hz")]
    SampleRate { expected: u32, found: u32 },

    #[error("bad magic: expected FDYW, found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("shape mismatch for entry `{name}`: model has {expected:?}, file has {found:?}")]
    EntryShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("dtype mismatch for entry `{name}`: model has {expected}, file has {found}")]
    EntryDtype { name: String, expected: String, found: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported layer: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
