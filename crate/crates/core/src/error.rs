use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error")]
    RawIo(#[from] std::io::Error),

    #[error("wav error on {path}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate track id `{0}`")]
    DuplicateTrack(String),

    #[error("identity `{identity}` leaks between train and unheard_val (tracks `{train_track}` and `{unheard_track}`)")]
    IdentityLeakage {
        identity: String,
        train_track: String,
        unheard_track: String,
    },

    #[error("input width {width} is below the minimum supported width {min}")]
    WidthTooSmall { width: usize, min: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
