//! Ranked lists, chunk-to-document aggregation and reciprocal-rank fusion.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dense::{DenseIndex, Embedder};
use crate::error::{Error, Result};
use crate::sparse::{CandidateFilter, SparseIndex};
use crate::types::Query;

/// A scored item: a chunk id before aggregation, a pid after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

impl Hit {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self { id: id.into(), score }
    }
}

/// Descending score, ascending id on ties.
pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sparse,
    Dense,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sparse, Strategy::Dense, Strategy::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sparse => "sparse",
            Strategy::Dense => "dense",
            Strategy::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s {
            "sparse" => Ok(Strategy::Sparse),
            "dense" => Ok(Strategy::Dense),
            "hybrid" => Ok(Strategy::Hybrid),
            other => Err(format!("unknown strategy {other:?} (expected sparse, dense or hybrid)")),
        }
    }
}

/// Document-level results for one query under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub strategy: Strategy,
    pub items: Vec<Hit>,
}

impl RankedList {
    pub fn new(qid: impl Into<String>, strategy: Strategy, items: Vec<Hit>) -> Self {
        Self { qid: qid.into(), strategy, items }
    }

    pub fn pids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|h| h.id.as_str())
    }
}

/// Collapses chunk hits to documents, scoring each document by its best
/// chunk.
pub fn aggregate_to_documents<'a, F>(chunk_hits: &'a [Hit], pid_of: F) -> Result<Vec<Hit>>
where
    F: Fn(&'a str) -> Option<&'a str>,
{
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for h in chunk_hits {
        let pid = pid_of(&h.id).ok_or_else(|| Error::UnresolvableChunk(h.id.clone()))?;
        best.entry(pid)
            .and_modify(|s| {
                if h.score > *s {
                    *s = h.score;
                }
            })
            .or_insert(h.score);
    }
    let mut docs: Vec<Hit> = best.into_iter().map(|(pid, s)| Hit::new(pid, s)).collect();
    sort_hits(&mut docs);
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    #[default]
    Rrf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    #[serde(default)]
    pub method: FusionMethod,
    pub rrf_k: f64,
    pub per_list_depth: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { method: FusionMethod::Rrf, rrf_k: 60.0, per_list_depth: 100 }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rrf_k.is_finite() && self.rrf_k > 0.0) {
            return Err(Error::InvalidFusion(format!("rrf_k = {} must be positive", self.rrf_k)));
        }
        if self.per_list_depth == 0 {
            return Err(Error::InvalidFusion("per_list_depth must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Reciprocal-rank fusion: each list contributes `1 / (rrf_k + rank)` for
/// every pid it contains, ranks starting at 1.
pub fn fuse(sparse: &RankedList, dense: &RankedList, params: &FusionParams) -> Result<RankedList> {
    if sparse.qid != dense.qid {
        return Err(Error::QidMismatch(sparse.qid.clone(), dense.qid.clone()));
    }
    params.validate()?;
    let mut fused: BTreeMap<&str, f64> = BTreeMap::new();
    for list in [sparse, dense] {
        for (i, h) in list.items.iter().enumerate() {
            *fused.entry(h.id.as_str()).or_default() += 1.0 / (params.rrf_k + (i + 1) as f64);
        }
    }
    let mut items: Vec<Hit> = fused.into_iter().map(|(pid, s)| Hit::new(pid, s)).collect();
    sort_hits(&mut items);
    Ok(RankedList::new(sparse.qid.clone(), Strategy::Hybrid, items))
}

/// Everything `retrieve` needs, built over one chunk store.
pub struct Indexes<'a, E: Embedder + ?Sized> {
    pub sparse: &'a SparseIndex,
    pub dense: &'a DenseIndex,
    pub embedder: &'a E,
}

/// Runs one strategy for one query, restricted to the query's candidate
/// documents, and returns at most `k` documents.
pub fn retrieve<E: Embedder + ?Sized>(
    query: &Query,
    strategy: Strategy,
    indexes: &Indexes<'_, E>,
    params: &FusionParams,
    k: usize,
) -> Result<RankedList> {
    let filter = CandidateFilter::Pids(query.source.clone());
    let sparse_docs = |depth: usize| -> Result<RankedList> {
        let hits = indexes.sparse.search(&query.query, depth, Some(&filter));
        let docs = aggregate_to_documents(&hits, |id| indexes.sparse.pid_of(id))?;
        Ok(RankedList::new(query.qid.clone(), Strategy::Sparse, docs))
    };
    let dense_docs = |depth: usize| -> Result<RankedList> {
        let hits = indexes.dense.search(&query.query, indexes.embedder, depth, Some(&filter))?;
        let docs = aggregate_to_documents(&hits, |id| indexes.dense.pid_of(id))?;
        Ok(RankedList::new(query.qid.clone(), Strategy::Dense, docs))
    };
    // Every candidate chunk is scored so that per-document maxima are exact;
    // depth limits apply after aggregation.
    let all = indexes.sparse.len().max(indexes.dense.len()).max(1);
    let mut list = match strategy {
        Strategy::Sparse => sparse_docs(all)?,
        Strategy::Dense => dense_docs(all)?,
        Strategy::Hybrid => {
            params.validate()?;
            let mut s = sparse_docs(all)?;
            let mut d = dense_docs(all)?;
            s.items.truncate(params.per_list_depth);
            d.items.truncate(params.per_list_depth);
            fuse(&s, &d, params)?
        }
    };
    list.items.truncate(k);
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn list(qid: &str, items: &[(&str, f64)]) -> RankedList {
        RankedList::new(qid, Strategy::Sparse, items.iter().map(|&(p, s)| Hit::new(p, s)).collect())
    }

    #[test]
    fn max_aggregation() {
        let hits = vec![Hit::new("A#1", 3.0), Hit::new("B#1", 2.5), Hit::new("A#2", 2.0)];
        let docs = aggregate_to_documents(&hits, |id| id.split('#').next()).unwrap();
        assert_eq!(docs, [Hit::new("A", 3.0), Hit::new("B", 2.5)]);
    }

    #[test]
    fn aggregation_edges() {
        let one = aggregate_to_documents(&[Hit::new("A#1", 0.7)], |id| id.split('#').next()).unwrap();
        assert_eq!(one, [Hit::new("A", 0.7)]);
        assert!(aggregate_to_documents(&[], |_| None).unwrap().is_empty());
        assert_eq!(aggregate_to_documents(&[Hit::new("zz", 1.0)], |_| None), Err(Error::UnresolvableChunk("zz".into())));
    }

    #[test]
    fn rrf_worked_example() {
        let s = list("q", &[("X", 9.0), ("Y", 8.0)]);
        let d = list("q", &[("Y", 0.9), ("Z", 0.8), ("X", 0.7)]);
        let fused = fuse(&s, &d, &FusionParams::default()).unwrap();
        let x = fused.items.iter().find(|h| h.id == "X").unwrap();
        assert!((x.score - (1.0 / 61.0 + 1.0 / 63.0)).abs() < 1e-12);
        assert!((x.score - 0.032266).abs() < 1e-6);
        let z = fused.items.iter().find(|h| h.id == "Z").unwrap();
        assert!((z.score - 1.0 / 62.0).abs() < 1e-12);
        assert_eq!(fused.strategy, Strategy::Hybrid);
    }

    #[test]
    fn rrf_single_list_contribution() {
        let s = list("q", &[("X", 1.0)]);
        let d = list("q", &[]);
        let fused = fuse(&s, &d, &FusionParams::default()).unwrap();
        assert_eq!(fused.items, [Hit::new("X", 1.0 / 61.0)]);
    }

    #[test]
    fn rrf_identical_lists_keep_order() {
        let s = list("q", &[("C", 5.0), ("A", 4.0), ("B", 4.0)]);
        let fused = fuse(&s, &s, &FusionParams::default()).unwrap();
        assert_eq!(fused.pids().collect::<Vec<_>>(), ["C", "A", "B"]);
    }

    #[test]
    fn rrf_rejects_mismatched_qids_and_bad_k() {
        assert_eq!(fuse(&list("a", &[]), &list("b", &[]), &FusionParams::default()), Err(Error::QidMismatch("a".into(), "b".into())));
        let bad = FusionParams { rrf_k: 0.0, ..FusionParams::default() };
        assert!(fuse(&list("a", &[]), &list("a", &[]), &bad).is_err());
    }

    #[test]
    fn strategy_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("bm25".parse::<Strategy>().is_err());
    }
}
