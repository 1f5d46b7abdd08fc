//! Okapi BM25 over segmented chunks.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·dl/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! Query terms are summed as a sequence, so a repeated query term counts
//! once per occurrence.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chunk::Chunk;
use crate::error::{Error, Result};
use crate::fusion::{sort_hits, Hit};
use crate::segment::{segment, Lexicon};
use crate::text::nfc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(Error::InvalidBm25(alloc::format!("k1 = {} must be a non-negative number", self.k1)));
        }
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::InvalidBm25(alloc::format!("b = {} must be a non-negative number", self.b)));
        }
        Ok(())
    }
}

/// Restricts retrieval to a candidate pool, either by chunk or by document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateFilter {
    Chunks(BTreeSet<String>),
    Pids(BTreeSet<String>),
}

impl CandidateFilter {
    pub fn admits(&self, chunk_id: &str, pid: &str) -> bool {
        match self {
            CandidateFilter::Chunks(ids) => ids.contains(chunk_id),
            CandidateFilter::Pids(pids) => pids.contains(pid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    pub params: Bm25Params,
    lexicon: Lexicon,
    /// Postings sorted by chunk id.
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<String, u32>,
    doc_pids: BTreeMap<String, String>,
    avgdl: f64,
}

/// Per-chunk statistics, the unit the index is serialized as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub chunk_id: String,
    pub pid: String,
    pub length: u32,
}

impl SparseIndex {
    pub fn build(chunks: &[Chunk], lexicon: &Lexicon, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let mut postings: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        let mut docs = Vec::with_capacity(chunks.len());
        let mut seen = BTreeSet::new();
        for chunk in chunks {
            if !seen.insert(chunk.chunk_id.as_str()) {
                return Err(Error::DuplicateChunkId(chunk.chunk_id.clone()));
            }
            let terms = segment(&chunk.text, lexicon);
            docs.push(DocEntry { chunk_id: chunk.chunk_id.clone(), pid: chunk.pid.clone(), length: terms.len() as u32 });
            for term in terms {
                *postings.entry(term).or_default().entry(chunk.chunk_id.clone()).or_default() += 1;
            }
        }
        let postings = postings
            .into_iter()
            .map(|(term, by_chunk)| {
                let list = by_chunk.into_iter().map(|(chunk_id, tf)| Posting { chunk_id, tf }).collect();
                (term, list)
            })
            .collect();
        Self::from_parts(params, lexicon.clone(), docs, postings)
    }

    /// Reassembles an index from its serialized parts, re-deriving `avgdl`
    /// and checking that every posting refers to a known chunk.
    pub fn from_parts(params: Bm25Params, lexicon: Lexicon, docs: Vec<DocEntry>, postings: BTreeMap<String, Vec<Posting>>) -> Result<Self> {
        params.validate()?;
        let mut doc_lengths = BTreeMap::new();
        let mut doc_pids = BTreeMap::new();
        for d in docs {
            if doc_lengths.insert(d.chunk_id.clone(), d.length).is_some() {
                return Err(Error::DuplicateChunkId(d.chunk_id));
            }
            doc_pids.insert(d.chunk_id, d.pid);
        }
        for list in postings.values() {
            for p in list {
                if !doc_lengths.contains_key(&p.chunk_id) {
                    return Err(Error::UnresolvableChunk(p.chunk_id.clone()));
                }
            }
        }
        let total: u64 = doc_lengths.values().map(|&l| u64::from(l)).sum();
        let avgdl = if doc_lengths.is_empty() { 0.0 } else { total as f64 / doc_lengths.len() as f64 };
        Ok(Self { params, lexicon, postings, doc_lengths, doc_pids, avgdl })
    }

    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, term: &str, chunk_id: &str) -> u32 {
        self.postings.get(term).and_then(|l| l.binary_search_by(|p| p.chunk_id.as_str().cmp(chunk_id)).ok().map(|i| l[i].tf)).unwrap_or(0)
    }

    pub fn postings(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(t, l)| (t.as_str(), l.as_slice()))
    }

    pub fn docs(&self) -> impl Iterator<Item = DocEntry> + '_ {
        self.doc_lengths.iter().map(move |(id, &length)| DocEntry { chunk_id: id.clone(), pid: self.doc_pids[id].clone(), length })
    }

    pub fn pid_of(&self, chunk_id: &str) -> Option<&str> {
        self.doc_pids.get(chunk_id).map(String::as_str)
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// Top-`k` chunks by BM25, restricted to `filter` when given. Chunks
    /// that match no query term are omitted.
    pub fn search(&self, query: &str, k: usize, filter: Option<&CandidateFilter>) -> Vec<Hit> {
        let Bm25Params { k1, b } = self.params;
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for term in segment(&nfc(query), &self.lexicon) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(list.len());
            for p in list {
                let pid = &self.doc_pids[&p.chunk_id];
                if filter.is_some_and(|f| !f.admits(&p.chunk_id, pid)) {
                    continue;
                }
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_lengths[&p.chunk_id]);
                let norm = 1.0 - b + b * dl / self.avgdl;
                *scores.entry(p.chunk_id.as_str()).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        let mut hits: Vec<Hit> = scores.into_iter().filter(|&(_, s)| s > 0.0).map(|(id, score)| Hit::new(id, score)).collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        hits
    }
}
