use std::io;
use std::path::PathBuf;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 1,
    Data = 2,
    Provider = 3,
    Internal = 4,
}

#[derive(Debug, thiserror::Error)]
pub enum KapError {
    #[error("configuration error:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: kap_core::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing manifest {0}")]
    MissingManifest(PathBuf),
    #[error("{0}")]
    Data(#[from] kap_core::Error),
    #[error("page {page_no} of {pid:?} has no image")]
    NoImage { pid: String, page_no: u32 },
    #[error("OCR engine exited with code {code:?}: {stderr}")]
    OcrEngineFailed { code: Option<i32>, stderr: String },
    #[error("OCR engine produced no output file at {0}")]
    OcrOutputMissing(PathBuf),
    #[error("OCR output at {0} is not valid UTF-8")]
    OcrNotUtf8(PathBuf),
    #[error("unsupported image type {0} (expected png, jpeg, gif or webp)")]
    UnsupportedImage(PathBuf),
    #[error("sparse index was built with lexicon {index}, but the supplied lexicon hashes to {supplied}")]
    LexiconMismatch { index: String, supplied: String },

    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),
    #[error("replay cache has no entry for key {0}")]
    CacheMiss(String),
    #[error("replay cache entry {path} is corrupt: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },
    #[error("provider returned an empty enhancement for page {page_no} of {pid:?}")]
    EmptyEnhancement { pid: String, page_no: u32 },
    #[error("provider returned an empty reformulation of {qid:?} under strategy {strategy}")]
    EmptyVariant { qid: String, strategy: u8 },
    #[error("{} page(s) failed:\n  - {}", .0.len(), .0.join("\n  - "))]
    PagesFailed(Vec<String>),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl KapError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        KapError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            KapError::Config(_) => ExitCode::Config,
            KapError::Provider(_)
            | KapError::CacheMiss(_)
            | KapError::CacheCorrupt { .. }
            | KapError::EmptyEnhancement { .. }
            | KapError::EmptyVariant { .. }
            | KapError::PagesFailed(_) => ExitCode::Provider,
            KapError::Invariant(_) => ExitCode::Internal,
            _ => ExitCode::Data,
        }
    }
}

/// Transport-level failures from a hosted model.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("network access attempted in replay-only mode")]
    NetworkForbidden,
}

impl ProviderError {
    /// 429 and 5xx are worth another attempt, as are connection failures.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            ProviderError::Transport(_) => true,
            _ => false,
        }
    }
}

pub type Result<T, E = KapError> = std::result::Result<T, E>;
