//! Allocation-only core of the KAP preprocessing-for-retrieval pipeline.
//!
//! Everything here is a pure function over in-memory data: page-aware
//! chunking, lexicon segmentation, BM25 and exact cosine retrieval,
//! reciprocal-rank fusion, MRR / Precision@1 evaluation, and the prompt
//! builders used for post-OCR enhancement and query augmentation.
//!
//! IO, provider clients, caches and the command line live in the `kap`
//! crate, which enables the `std` feature of this one.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod chunk;
pub mod dense;
pub mod error;
pub mod fusion;
pub mod hash;
pub mod metrics;
pub mod prompt;
pub mod segment;
pub mod sparse;
pub mod text;
pub mod types;

pub use chunk::{Chunk, ChunkParams, CjkWordCounter, SplitMode, TokenCounter};
pub use dense::{DenseIndex, Embedder, HashedNgramEmbedder};
pub use error::{Error, Result};
pub use fusion::{FusionMethod, FusionParams, RankedList, Strategy};
pub use metrics::{EvalReport, ReportRow};
pub use prompt::{EnhanceConfig, Preset, PromptRequest, PromptSection};
pub use segment::Lexicon;
pub use sparse::{Bm25Params, CandidateFilter, SparseIndex};
pub use types::{Category, Document, Origin, Page, Query};
