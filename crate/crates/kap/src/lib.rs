//! Pipeline stages, file formats and provider plumbing around `kap-core`.

pub mod augment;
pub mod cache;
pub mod config;
pub mod embed;
pub mod enhance;
pub mod error;
pub mod ingest;
pub mod jsonl;
pub mod ocr;
pub mod par;
pub mod pipeline;
pub mod provider;
pub mod report;
pub mod stores;

pub use error::{ExitCode, KapError, ProviderError, Result};
