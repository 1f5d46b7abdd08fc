use alloc::string::String;

/// Errors raised by the pure pipeline stages.
///
/// Data-validation variants carry enough locus (pid, page, qid) for the
/// caller to point at the offending record; file locus is added by the
/// loaders in the `kap` crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate pid {0:?}")]
    DuplicatePid(String),
    #[error("document {0:?} has no pages")]
    NoPages(String),
    #[error("document {pid:?}: page numbers must be 1-based and contiguous, found {found} where {expected} was expected")]
    PageNumbering { pid: String, expected: u32, found: u32 },
    #[error("page {page_no} of {pid:?} has neither OCR text nor an image")]
    EmptyPage { pid: String, page_no: u32 },
    #[error("empty pid")]
    EmptyPid,
    #[error("query {0:?}: ground truth is not a subset of the candidate sources")]
    GroundTruthNotCandidate(String),
    #[error("query {0:?}: source and ground truth must both be non-empty")]
    EmptyQuerySets(String),
    #[error("query {qid:?}: augmentation strategy {strategy} is outside 1..=9")]
    BadStrategy { qid: String, strategy: u8 },
    #[error("duplicate qid {0:?}")]
    DuplicateQid(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("invalid chunk parameters: overlap {overlap} must be smaller than chunk size {size}")]
    InvalidChunkParams { size: usize, overlap: usize },
    #[error("duplicate chunk id {0:?}")]
    DuplicateChunkId(String),
    #[error("chunk {0:?} has no known document")]
    UnresolvableChunk(String),
    #[error("embedder fingerprint mismatch: index built with {index:?}, query embedder is {query:?}")]
    FingerprintMismatch { index: String, query: String },
    #[error("embedder {fingerprint:?} returned {got} dimensions, expected {expected}")]
    DimensionMismatch { fingerprint: String, expected: usize, got: usize },
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("ranked lists belong to different queries ({0:?} vs {1:?})")]
    QidMismatch(String, String),
    #[error("no run for query {0:?}")]
    MissingRun(String),
    #[error("invalid enhancement config: at least one of vision or OCR text input must be enabled")]
    NoModality,
    #[error("invalid fusion parameters: {0}")]
    InvalidFusion(String),
    #[error("invalid BM25 parameters: {0}")]
    InvalidBm25(String),
    #[error("lexicon entry {0:?} contains whitespace")]
    LexiconWhitespace(String),
    #[error("query {0:?} is already an augmented variant")]
    NotAnOriginal(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
