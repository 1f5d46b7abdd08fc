//! Evaluation reports: machine-readable records plus rendered tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use kap_core::fusion::Strategy;
use kap_core::metrics::QueryOutcome;
use kap_core::{FusionParams, Query, ReportRow};
use serde::{Deserialize, Serialize};

use crate::error::{KapError, Result};
use crate::jsonl;

pub const REPORT_FORMAT: &str = "kap-report/1";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub total: usize,
    pub original: usize,
    pub augmented: usize,
}

impl QueryCounts {
    pub fn of(queries: &[Query]) -> Self {
        let original = queries.iter().filter(|q| q.is_original()).count();
        Self { total: queries.len(), original, augmented: queries.len() - original }
    }
}

/// Everything that shaped a row's numbers besides the enhanced text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSettings {
    pub depth: usize,
    pub counter: String,
    pub embedder: String,
    pub fusion: FusionParams,
    pub k1: f64,
    pub b: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub config: String,
    pub display_name: String,
    pub strategy: Strategy,
    pub mrr: f64,
    pub p_at_1: f64,
    pub n: usize,
    pub n_original: usize,
    pub n_augmented: usize,
    /// Largest distance of a single repeat from the mean.
    pub mrr_max_dev: f64,
    pub p_at_1_max_dev: f64,
    #[serde(flatten)]
    pub settings: RowSettings,
    /// Outcomes of the first repeat.
    pub per_query: BTreeMap<String, QueryOutcome>,
}

impl RowRecord {
    /// Aggregates the repeats of one (config, strategy) cell.
    pub fn from_repeats(config: &str, display_name: &str, repeats: &[ReportRow], settings: RowSettings, queries: &[Query]) -> Result<Self> {
        let first = repeats.first().ok_or_else(|| KapError::Invariant(format!("no runs for {config}")))?;
        for r in repeats {
            r.check().map_err(|e| KapError::Invariant(format!("{config}/{}: {e}", r.strategy)))?;
        }
        let n = repeats.len() as f64;
        let mrr = repeats.iter().map(|r| r.mrr).sum::<f64>() / n;
        let p1 = repeats.iter().map(|r| r.precision_at_1).sum::<f64>() / n;
        let dev = |f: fn(&ReportRow) -> f64, mean: f64| repeats.iter().map(|r| (f(r) - mean).abs()).fold(0.0, f64::max);
        let counts = QueryCounts::of(queries);
        Ok(Self {
            config: config.into(),
            display_name: display_name.into(),
            strategy: first.strategy,
            mrr,
            p_at_1: p1,
            n: first.n_queries,
            n_original: counts.original,
            n_augmented: counts.augmented,
            mrr_max_dev: dev(|r| r.mrr, mrr),
            p_at_1_max_dev: dev(|r| r.precision_at_1, p1),
            settings,
            per_query: first.per_query.clone(),
        })
    }

    /// The first repeat as a core row, for subset metrics.
    pub fn as_row(&self) -> ReportRow {
        ReportRow {
            config: self.config.clone(),
            strategy: self.strategy,
            mrr: self.mrr,
            precision_at_1: self.p_at_1,
            n_queries: self.n,
            depth: self.settings.depth,
            per_query: self.per_query.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub resolved_config: serde_json::Value,
    pub queries: QueryCounts,
    pub rows: Vec<RowRecord>,
    /// Columns that did not complete, with the reason.
    pub failures: BTreeMap<String, String>,
}

impl Report {
    pub fn row(&self, config: &str, strategy: Strategy) -> Option<&RowRecord> {
        self.rows.iter().find(|r| r.config == config && r.strategy == strategy)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        jsonl::write_atomic(&dir.join(REPORT_JSON), self.to_json().as_bytes())?;
        jsonl::write_atomic(&dir.join(REPORT_TXT), render_tables(self).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| KapError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| KapError::Malformed { path, line: 0, message: e.to_string() })
    }
}

fn title(s: Strategy) -> &'static str {
    match s {
        Strategy::Sparse => "Sparse Retrieval (BM25)",
        Strategy::Dense => "Dense Retrieval",
        Strategy::Hybrid => "Hybrid Retrieval (RRF)",
    }
}

/// One table per strategy: method, MRR %, P@1 %, two decimals.
pub fn render_tables(report: &Report) -> String {
    let mut out = String::new();
    let q = &report.queries;
    for s in Strategy::ALL {
        let rows: Vec<&RowRecord> = report.rows.iter().filter(|r| r.strategy == s).collect();
        if rows.is_empty() {
            continue;
        }
        let st = &rows[0].settings;
        let _ = writeln!(out, "{}", title(s));
        let _ = writeln!(
            out,
            "queries {} ({} original + {} augmented), depth {}, counter {}, embedder {}",
            q.total, q.original, q.augmented, st.depth, st.counter, st.embedder
        );
        let _ = writeln!(out, "{:<20} {:>8} {:>8}", "Method", "MRR (%)", "P@1 (%)");
        for r in rows {
            let _ = writeln!(out, "{:<20} {:>8.2} {:>8.2}", r.display_name, r.mrr * 100.0, r.p_at_1 * 100.0);
        }
        out.push('\n');
    }
    for (config, why) in &report.failures {
        let _ = writeln!(out, "FAILED {config}: {}", why.lines().next().unwrap_or(""));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use kap_core::Category;

    fn row(mrr: f64, p1: f64) -> ReportRow {
        let per_query = [("q1".to_string(), QueryOutcome { first_correct_rank: Some(1), top1: Some("A".into()) })].into_iter().collect();
        ReportRow { config: "full".into(), strategy: Strategy::Sparse, mrr, precision_at_1: p1, n_queries: 1, depth: 10, per_query }
    }

    fn settings() -> RowSettings {
        RowSettings {
            depth: 10,
            counter: "cjk-word@1".into(),
            embedder: "hashed-char3@1/256".into(),
            fusion: FusionParams::default(),
            k1: 1.5,
            b: 0.75,
            repeats: 1,
        }
    }

    fn query() -> Query {
        Query {
            qid: "q1".into(),
            query: "x".into(),
            source: ["A".to_string()].into_iter().collect(),
            ground_truth: ["A".to_string()].into_iter().collect(),
            category: Category::Faq,
            origin: None,
        }
    }

    #[test]
    fn table_uses_percentages_with_two_decimals() {
        let rec = RowRecord::from_repeats("full", "KAP (Ours)", &[row(1.0, 1.0)], settings(), &[query()]).unwrap();
        let report = Report {
            format: REPORT_FORMAT.into(),
            resolved_config: serde_json::Value::Null,
            queries: QueryCounts::of(&[query()]),
            rows: vec![rec],
            failures: BTreeMap::new(),
        };
        let t = render_tables(&report);
        assert!(t.contains("Sparse Retrieval (BM25)"));
        assert!(t.contains("KAP (Ours)             100.00   100.00"), "{t}");
        assert!(!t.contains("Dense"));
        let back: Report = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn inconsistent_row_is_an_invariant_failure() {
        let bad = row(0.5, 1.0);
        assert!(matches!(RowRecord::from_repeats("full", "x", &[bad], settings(), &[query()]), Err(KapError::Invariant(_))));
    }
}
