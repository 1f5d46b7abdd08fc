//! Dense retrieval: pluggable embedders and exact cosine top-k.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::chunk::Chunk;
use crate::error::{Error, Result};
use crate::fusion::{sort_hits, Hit};
use crate::hash::fnv1a64;
use crate::sparse::CandidateFilter;

/// Tolerance on stored vector norms.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Maps text to a fixed-dimension vector. `embed_raw` need not normalize;
/// [`embed_text`] takes care of that.
pub trait Embedder {
    /// Backend name, version and dimension; indexes remember it.
    fn fingerprint(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>>;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        (**self).embed_raw(text)
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
}

/// Scales to unit length; the zero vector stays zero.
pub fn normalize(v: &[f32]) -> Vec<f32> {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

pub fn is_zero(v: &[f32]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Embeds and L2-normalizes. Whitespace-only text maps to the zero vector
/// without calling the backend.
pub fn embed_text<E: Embedder + ?Sized>(embedder: &E, text: &str) -> Result<Vec<f32>> {
    let dim = embedder.dim();
    if text.trim().is_empty() {
        return Ok(vec![0.0; dim]);
    }
    let raw = embedder.embed_raw(text)?;
    if raw.len() != dim {
        return Err(Error::DimensionMismatch { fingerprint: embedder.fingerprint(), expected: dim, got: raw.len() });
    }
    Ok(normalize(&raw))
}

/// Signed feature hashing of character trigrams.
///
/// Text is lowercased and whitespace runs collapse to one space; text
/// shorter than three characters hashes as a single gram.
#[derive(Debug, Clone, Copy)]
pub struct HashedNgramEmbedder {
    dim: usize,
}

impl HashedNgramEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl Embedder for HashedNgramEmbedder {
    fn fingerprint(&self) -> String {
        format!("hashed-char3@1/{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let mut chars: Vec<char> = Vec::new();
        for c in text.trim().chars().flat_map(char::to_lowercase) {
            if c.is_whitespace() {
                if chars.last() != Some(&' ') {
                    chars.push(' ');
                }
            } else {
                chars.push(c);
            }
        }
        let mut v = vec![0.0f32; self.dim];
        if chars.is_empty() {
            return Ok(v);
        }
        let mut buf = String::new();
        let mut add = |gram: &[char]| {
            buf.clear();
            buf.extend(gram);
            let h = fnv1a64(buf.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        if chars.len() < 3 {
            add(&chars);
        } else {
            chars.windows(3).for_each(add);
        }
        Ok(v)
    }
}

/// Unit vectors keyed by chunk id, tagged with the embedder that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    fingerprint: String,
    dim: usize,
    vectors: BTreeMap<String, Vec<f32>>,
    pids: BTreeMap<String, String>,
}

/// One stored vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub chunk_id: String,
    pub pid: String,
    pub vector: Vec<f32>,
}

#[derive(PartialEq)]
struct Ranked<'a> {
    score: f64,
    id: &'a str,
}

impl Eq for Ranked<'_> {}

impl Ord for Ranked<'_> {
    // "Greater" means worse: lower score, then larger id. The heap's top is
    // the current worst of the kept set.
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl DenseIndex {
    pub fn build<E: Embedder + ?Sized>(chunks: &[Chunk], embedder: &E) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut records = Vec::with_capacity(chunks.len());
        for c in chunks {
            if !seen.insert(c.chunk_id.as_str()) {
                return Err(Error::DuplicateChunkId(c.chunk_id.clone()));
            }
            let vector = embed_text(embedder, &c.text).map_err(|e| Error::Embedding(format!("chunk {}: {e}", c.chunk_id)))?;
            records.push(VectorRecord { chunk_id: c.chunk_id.clone(), pid: c.pid.clone(), vector });
        }
        Self::from_records(embedder.fingerprint(), embedder.dim(), records)
    }

    /// Validates dimensions and norms of already-embedded vectors.
    pub fn from_records(fingerprint: String, dim: usize, records: Vec<VectorRecord>) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        let mut pids = BTreeMap::new();
        for r in records {
            if r.vector.len() != dim {
                return Err(Error::DimensionMismatch { fingerprint, expected: dim, got: r.vector.len() });
            }
            let norm = l2_norm(&r.vector);
            if !is_zero(&r.vector) && (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Embedding(format!("stored vector for {} has norm {norm}", r.chunk_id)));
            }
            if vectors.insert(r.chunk_id.clone(), r.vector).is_some() {
                return Err(Error::DuplicateChunkId(r.chunk_id));
            }
            pids.insert(r.chunk_id, r.pid);
        }
        Ok(Self { fingerprint, dim, vectors, pids })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, chunk_id: &str) -> Option<&[f32]> {
        self.vectors.get(chunk_id).map(Vec::as_slice)
    }

    pub fn pid_of(&self, chunk_id: &str) -> Option<&str> {
        self.pids.get(chunk_id).map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = VectorRecord> + '_ {
        self.vectors.iter().map(move |(id, v)| VectorRecord { chunk_id: id.clone(), pid: self.pids[id].clone(), vector: v.clone() })
    }

    pub fn search<E: Embedder + ?Sized>(&self, query: &str, embedder: &E, k: usize, filter: Option<&CandidateFilter>) -> Result<Vec<Hit>> {
        let fp = embedder.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch { index: self.fingerprint.clone(), query: fp });
        }
        let qv = embed_text(embedder, query)?;
        Ok(self.search_vector(&qv, k, filter))
    }

    /// Exact top-`k` by cosine similarity against a unit query vector.
    /// Zero vectors on either side are never retrieved.
    pub fn search_vector(&self, query: &[f32], k: usize, filter: Option<&CandidateFilter>) -> Vec<Hit> {
        if k == 0 || is_zero(query) {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Ranked<'_>> = BinaryHeap::with_capacity(k + 1);
        for (id, v) in &self.vectors {
            if is_zero(v) || filter.is_some_and(|f| !f.admits(id, &self.pids[id])) {
                continue;
            }
            let score: f64 = v.iter().zip(query).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            let cand = Ranked { score, id };
            if heap.len() < k {
                heap.push(cand);
            } else if heap.peek().is_some_and(|worst| cand < *worst) {
                heap.pop();
                heap.push(cand);
            }
        }
        let mut hits: Vec<Hit> = heap.into_iter().map(|r| Hit::new(r.id, r.score)).collect();
        sort_hits(&mut hits);
        hits
    }
}
