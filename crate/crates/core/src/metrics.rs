//! Mean Reciprocal Rank and Precision@1.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Hit, RankedList, Strategy};
use crate::types::Query;

/// Default cut-off: results below this rank count as misses.
pub const DEFAULT_DEPTH: usize = 10;

/// 1-based rank of the first relevant item, if any.
pub fn first_relevant_rank(results: &[Hit], ground_truth: &BTreeSet<String>) -> Option<usize> {
    results.iter().position(|h| ground_truth.contains(&h.id)).map(|i| i + 1)
}

pub fn reciprocal_rank(results: &[Hit], ground_truth: &BTreeSet<String>) -> f64 {
    first_relevant_rank(results, ground_truth).map_or(0.0, |r| 1.0 / r as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub first_correct_rank: Option<usize>,
    pub top1: Option<String>,
}

impl QueryOutcome {
    pub fn reciprocal_rank(&self) -> f64 {
        self.first_correct_rank.map_or(0.0, |r| 1.0 / r as f64)
    }

    pub fn hit_at_1(&self) -> bool {
        self.first_correct_rank == Some(1)
    }
}

/// One (pipeline config, strategy) cell of the result matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub strategy: Strategy,
    pub mrr: f64,
    pub precision_at_1: f64,
    pub n_queries: usize,
    pub depth: usize,
    pub per_query: BTreeMap<String, QueryOutcome>,
}

impl ReportRow {
    /// Checks `P@1 ≤ MRR` and that MRR is the mean of the per-query
    /// reciprocal ranks.
    pub fn check(&self) -> core::result::Result<(), String> {
        if self.precision_at_1 > self.mrr + 1e-12 {
            return Err(alloc::format!("{}/{}: P@1 {} exceeds MRR {}", self.config, self.strategy, self.precision_at_1, self.mrr));
        }
        let n = self.per_query.len();
        let recomputed = if n == 0 { 0.0 } else { self.per_query.values().map(QueryOutcome::reciprocal_rank).sum::<f64>() / n as f64 };
        if (recomputed - self.mrr).abs() > 1e-12 || n != self.n_queries {
            return Err(alloc::format!(
                "{}/{}: MRR {} disagrees with per-query mean {} over {} queries",
                self.config,
                self.strategy,
                self.mrr,
                recomputed,
                n
            ));
        }
        Ok(())
    }

    /// Metrics restricted to the given qids.
    pub fn subset<'a, I: IntoIterator<Item = &'a str>>(&self, qids: I) -> (f64, f64, usize) {
        let outcomes: Vec<&QueryOutcome> = qids.into_iter().filter_map(|q| self.per_query.get(q)).collect();
        let n = outcomes.len();
        if n == 0 {
            return (0.0, 0.0, 0);
        }
        let mrr = outcomes.iter().map(|o| o.reciprocal_rank()).sum::<f64>() / n as f64;
        let p1 = outcomes.iter().filter(|o| o.hit_at_1()).count() as f64 / n as f64;
        (mrr, p1, n)
    }
}

/// Rows of one evaluation, in matrix order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, config: &str, strategy: Strategy) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.config == config && r.strategy == strategy)
    }

    pub fn check(&self) -> core::result::Result<(), String> {
        self.rows.iter().try_for_each(ReportRow::check)
    }
}

/// Scores one run. Every query must have a ranked list; empty lists and
/// gold documents below `depth` count as misses.
pub fn evaluate(
    config: &str,
    strategy: Strategy,
    runs: &BTreeMap<String, RankedList>,
    queries: &[Query],
    depth: usize,
) -> Result<ReportRow> {
    let mut per_query = BTreeMap::new();
    let mut rr_sum = 0.0;
    let mut hits_at_1 = 0usize;
    for q in queries {
        let run = runs.get(&q.qid).ok_or_else(|| Error::MissingRun(q.qid.clone()))?;
        let results = &run.items[..run.items.len().min(depth)];
        let outcome =
            QueryOutcome { first_correct_rank: first_relevant_rank(results, &q.ground_truth), top1: results.first().map(|h| h.id.clone()) };
        rr_sum += outcome.reciprocal_rank();
        hits_at_1 += usize::from(outcome.hit_at_1());
        per_query.insert(q.qid.clone(), outcome);
    }
    let n = queries.len();
    let (mrr, precision_at_1) = if n == 0 { (0.0, 0.0) } else { (rr_sum / n as f64, hits_at_1 as f64 / n as f64) };
    Ok(ReportRow { config: config.into(), strategy, mrr, precision_at_1, n_queries: n, depth, per_query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Category;
    use alloc::string::ToString;
    use alloc::vec;

    fn gold(p: &str) -> BTreeSet<String> {
        [p.to_string()].into_iter().collect()
    }

    fn hits(pids: &[&str]) -> Vec<Hit> {
        pids.iter().enumerate().map(|(i, p)| Hit::new(*p, 1.0 / (i + 1) as f64)).collect()
    }

    fn query(qid: &str, gold_pid: &str) -> Query {
        Query {
            qid: qid.into(),
            query: String::new(),
            source: ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect(),
            ground_truth: gold(gold_pid),
            category: Category::Finance,
            origin: None,
        }
    }

    #[test]
    fn reciprocal_rank_cases() {
        assert_eq!(reciprocal_rank(&hits(&["A", "B"]), &gold("A")), 1.0);
        assert_eq!(reciprocal_rank(&hits(&["B", "C", "D", "A"]), &gold("A")), 0.25);
        assert_eq!(reciprocal_rank(&hits(&["B", "C"]), &gold("A")), 0.0);
    }

    #[test]
    fn ranks_two_and_four() {
        let queries = vec![query("1", "A"), query("2", "A")];
        let mut runs = BTreeMap::new();
        runs.insert("1".to_string(), RankedList::new("1", Strategy::Sparse, hits(&["B", "A"])));
        runs.insert("2".to_string(), RankedList::new("2", Strategy::Sparse, hits(&["B", "C", "D", "A"])));
        let row = evaluate("baseline", Strategy::Sparse, &runs, &queries, DEFAULT_DEPTH).unwrap();
        assert_eq!(row.mrr, 0.375);
        assert_eq!(row.precision_at_1, 0.0);
        assert_eq!(row.per_query["2"].first_correct_rank, Some(4));
        assert_eq!(row.per_query["2"].top1.as_deref(), Some("B"));
        row.check().unwrap();
    }

    #[test]
    fn perfect_run_and_empty_list() {
        let queries = vec![query("1", "A"), query("2", "B")];
        let mut runs = BTreeMap::new();
        runs.insert("1".to_string(), RankedList::new("1", Strategy::Dense, hits(&["A"])));
        runs.insert("2".to_string(), RankedList::new("2", Strategy::Dense, hits(&["B"])));
        let row = evaluate("full", Strategy::Dense, &runs, &queries, DEFAULT_DEPTH).unwrap();
        assert_eq!((row.mrr, row.precision_at_1), (1.0, 1.0));

        runs.insert("2".to_string(), RankedList::new("2", Strategy::Dense, vec![]));
        let row = evaluate("full", Strategy::Dense, &runs, &queries, DEFAULT_DEPTH).unwrap();
        assert_eq!((row.mrr, row.precision_at_1, row.n_queries), (0.5, 0.5, 2));
        assert_eq!(row.per_query["2"], QueryOutcome { first_correct_rank: None, top1: None });
    }

    #[test]
    fn depth_cuts_off() {
        let queries = vec![query("1", "A")];
        let mut runs = BTreeMap::new();
        runs.insert("1".to_string(), RankedList::new("1", Strategy::Sparse, hits(&["B", "C", "A"])));
        assert_eq!(evaluate("x", Strategy::Sparse, &runs, &queries, 2).unwrap().mrr, 0.0);
        assert!((evaluate("x", Strategy::Sparse, &runs, &queries, 3).unwrap().mrr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn missing_run() {
        let queries = vec![query("1", "A")];
        assert_eq!(evaluate("x", Strategy::Sparse, &BTreeMap::new(), &queries, 10), Err(Error::MissingRun("1".into())));
    }

    #[test]
    fn subset_metrics() {
        let queries = vec![query("1", "A"), query("2", "A")];
        let mut runs = BTreeMap::new();
        runs.insert("1".to_string(), RankedList::new("1", Strategy::Sparse, hits(&["A"])));
        runs.insert("2".to_string(), RankedList::new("2", Strategy::Sparse, hits(&["B", "A"])));
        let row = evaluate("x", Strategy::Sparse, &runs, &queries, 10).unwrap();
        assert_eq!(row.subset(["1"]), (1.0, 1.0, 1));
        assert_eq!(row.subset(["2"]), (0.5, 0.0, 1));
    }
}
