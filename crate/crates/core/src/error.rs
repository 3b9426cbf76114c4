use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: u32, vocab_size: usize },

    #[error("position {position} is not past the last cached position {last}")]
    NonMonotonePosition { position: usize, last: usize },

    #[error("character {ch:?} at offset {offset} is outside the tokenizer alphabet")]
    UnknownCharacter { ch: char, offset: usize },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("span coverage mismatch: source covers {src} chars, destination covers {dst}")]
    CoverageMismatch { src: usize, dst: usize },

    #[error("incompatible caches: {0}")]
    IncompatibleCaches(String),

    #[error("selection index {index} lies inside the retained prefix (len {prefix_len})")]
    IndexInPrefix { index: usize, prefix_len: usize },

    #[error("selection index {index} out of range for cache of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("selection indices must be strictly increasing")]
    UnsortedSelection,

    #[error("bad magic bytes in cache file")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("missing tensor `{0}` in weight manifest")]
    MissingTensor(String),

    #[error("tensor `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
