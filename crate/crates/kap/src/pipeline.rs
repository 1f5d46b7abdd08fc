//! Stage wiring. Each stage reads and writes only its own stores under
//! `<output>/<arm>/`, so running the stages one by one produces the same
//! bytes as `matrix`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use kap_core::chunk::{chunk_corpus, Chunk};
use kap_core::fusion::{retrieve, Indexes, RankedList, Strategy};
use kap_core::metrics::evaluate;
use kap_core::{Category, CjkWordCounter, HashedNgramEmbedder, Lexicon, Preset, Query, SparseIndex, TokenCounter};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_questions, prepare_variant};
use crate::cache::ReplayCache;
use crate::config::{Arm, EmbedderBackend, ProviderMode, RunConfig};
use crate::embed::{build_dense, Backend, CachedEmbedder, RemoteEmbedder};
use crate::enhance::{self, EnhancedPage};
use crate::error::{KapError, Result};
use crate::ingest::{self, CorpusStore};
use crate::jsonl;
use crate::par::{self, RateLimiter};
use crate::provider::{Gateway, ProviderClient, RetryPolicy};
use crate::report::{QueryCounts, Report, RowRecord, RowSettings, REPORT_FORMAT};
use crate::stores::{self, Runs};

pub const ENHANCED_FILE: &str = "enhanced.jsonl";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const SPARSE_FILE: &str = "sparse.jsonl";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const RUNS_FILE: &str = "runs.jsonl";

/// Result of a full matrix run. Columns that failed are listed in the
/// report; the first such error is kept for the exit status.
#[derive(Debug)]
pub struct MatrixOutcome {
    pub report: Report,
    pub first_error: Option<KapError>,
}

/// A line of a responses file accepted by [`Pipeline::prime`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Page { preset: Preset, pid: String, page_no: u32, text: String },
    Variant { qid: String, strategy: u8, text: String },
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PrimeSummary {
    pub pages: usize,
    pub variants: usize,
}

pub struct Pipeline<'a> {
    pub cfg: RunConfig,
    client: &'a dyn ProviderClient,
    enhance_cache: ReplayCache,
    augment_cache: ReplayCache,
    embed_cache: ReplayCache,
    limiter: RateLimiter,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: RunConfig, client: &'a dyn ProviderClient) -> Result<Self> {
        cfg.validate()?;
        let replay_only = cfg.provider.mode == ProviderMode::ReplayOnly;
        let root = cache_root(&cfg);
        Ok(Self {
            enhance_cache: ReplayCache::open(root.join("enhance"), replay_only)?,
            augment_cache: ReplayCache::open(root.join("augment"), replay_only)?,
            embed_cache: ReplayCache::open(root.join("embed"), replay_only)?,
            limiter: RateLimiter::new(cfg.provider.requests_per_second),
            cfg,
            client,
        })
    }

    fn gateway<'g>(&'g self, cache: &'g ReplayCache) -> Gateway<'g> {
        Gateway::new(self.client, cache, &self.limiter, RetryPolicy::with_attempts(self.cfg.enhance.max_retries))
    }

    pub fn corpus_root(&self) -> PathBuf {
        self.cfg.resolve(&self.cfg.paths.corpus)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.cfg.resolve(&self.cfg.paths.output)
    }

    /// Store directory of one arm; repeats past the first get their own.
    pub fn arm_dir(&self, arm: &Arm, repeat: usize) -> PathBuf {
        let d = self.output_dir().join(&arm.name);
        if repeat == 0 {
            d
        } else {
            d.join(format!("repeat-{repeat}"))
        }
    }

    pub fn load_corpus(&self) -> Result<CorpusStore> {
        ingest::load_corpus(&self.corpus_root())
    }

    pub fn load_questions(&self) -> Result<Vec<Query>> {
        ingest::load_questions(&self.cfg.resolve(&self.cfg.paths.questions), self.cfg.eval.strict_questions)
    }

    pub fn load_lexicon(&self) -> Result<Lexicon> {
        let path = self.cfg.resolve(&self.cfg.paths.lexicon);
        let text = fs::read_to_string(&path).map_err(|e| KapError::io(&path, e))?;
        Lexicon::parse(&text).map_err(|source| KapError::Record { path, line: 0, source })
    }

    pub fn embedder(&self) -> Result<Backend<'_>> {
        let e = &self.cfg.embedder;
        Ok(match e.backend {
            EmbedderBackend::Hashed => Backend::Hashed(HashedNgramEmbedder::new(e.dim)),
            EmbedderBackend::Remote => {
                let remote = RemoteEmbedder::from_env(
                    e.endpoint.as_deref().unwrap_or_default(),
                    e.model.as_deref().unwrap_or_default(),
                    e.dim,
                    &e.api_key_env,
                    RetryPolicy::with_attempts(self.cfg.enhance.max_retries),
                    self.cfg.provider.requests_per_second,
                );
                match (remote, self.cfg.provider.mode) {
                    (Ok(r), _) => Backend::Remote(CachedEmbedder::new(r, &self.embed_cache)),
                    (Err(e), ProviderMode::Live) => return Err(e.into()),
                    (Err(_), _) => {
                        // Offline modes never reach the endpoint; a key is not required.
                        let r = RemoteEmbedder::offline(
                            e.endpoint.as_deref().unwrap_or_default(),
                            e.model.as_deref().unwrap_or_default(),
                            e.dim,
                        );
                        Backend::Remote(CachedEmbedder::new(r, &self.embed_cache))
                    }
                }
            }
        })
    }

    /// Arm with the repeat number folded into the prompt version, so each
    /// repeat after the first gets fresh provider responses.
    fn repeat_arm(arm: &Arm, repeat: usize) -> Arm {
        let mut a = arm.clone();
        if repeat > 0 {
            if let Some(c) = &mut a.config {
                c.prompt_version = format!("{}#r{repeat}", c.prompt_version);
            }
        }
        a
    }

    pub fn enhance(&self, arm: &Arm, repeat: usize) -> Result<Vec<EnhancedPage>> {
        let store = self.load_corpus()?;
        let a = Self::repeat_arm(arm, repeat);
        let gw = self.gateway(&self.enhance_cache);
        let pages = enhance::enhance_corpus(&store, a.config.as_ref(), &gw, &self.corpus_root(), self.cfg.parallelism)?;
        enhance::save_enhanced(&self.arm_dir(arm, repeat).join(ENHANCED_FILE), &pages)?;
        tracing::info!(stage = "enhance", arm = %arm.name, pages = pages.len(), "done");
        Ok(pages)
    }

    pub fn chunk(&self, arm: &Arm, repeat: usize) -> Result<Vec<Chunk>> {
        let dir = self.arm_dir(arm, repeat);
        let pages = enhance::load_enhanced(&dir.join(ENHANCED_FILE))?;
        let params = self.cfg.chunk_params();
        let chunks = chunk_corpus(&enhance::page_texts(&pages), &params, &CjkWordCounter)?;
        stores::save_chunks(&dir.join(CHUNKS_FILE), &CjkWordCounter.label(), &params, &chunks)?;
        tracing::info!(stage = "chunk", arm = %arm.name, chunks = chunks.len(), "done");
        Ok(chunks)
    }

    pub fn index(&self, arm: &Arm, repeat: usize) -> Result<()> {
        let dir = self.arm_dir(arm, repeat);
        let (header, chunks) = stores::load_chunks(&dir.join(CHUNKS_FILE))?;
        if header.counter != CjkWordCounter.label() {
            return Err(KapError::Config(vec![format!("chunk store was built with counter {}", header.counter)]));
        }
        let sparse = SparseIndex::build(&chunks, &self.load_lexicon()?, self.cfg.bm25_params())?;
        stores::save_sparse(&dir.join(SPARSE_FILE), &sparse)?;
        let dense = build_dense(&chunks, &self.embedder()?, self.cfg.parallelism)?;
        stores::save_vectors(&dir.join(VECTORS_FILE), &dense)?;
        tracing::info!(stage = "index", arm = %arm.name, chunks = chunks.len(), "done");
        Ok(())
    }

    fn load_indexes(&self, dir: &Path) -> Result<(SparseIndex, kap_core::DenseIndex)> {
        let sparse = stores::load_sparse(&dir.join(SPARSE_FILE), &self.load_lexicon()?)?;
        let dense = stores::load_vectors(&dir.join(VECTORS_FILE))?;
        Ok((sparse, dense))
    }

    /// Ranks every question under every strategy and writes the run file.
    pub fn retrieve_all(&self, arm: &Arm, repeat: usize, queries: &[Query]) -> Result<Runs> {
        let dir = self.arm_dir(arm, repeat);
        let (sparse, dense) = self.load_indexes(&dir)?;
        let embedder = self.embedder()?;
        let indexes = Indexes { sparse: &sparse, dense: &dense, embedder: &embedder };
        let fusion = self.cfg.fusion_params();
        let work: Vec<(Strategy, &Query)> = Strategy::ALL.iter().flat_map(|&s| queries.iter().map(move |q| (s, q))).collect();
        let lists = par::map(&work, self.cfg.parallelism, |(s, q)| retrieve(q, *s, &indexes, &fusion, self.cfg.eval.depth));
        let mut runs = Runs::new();
        for s in Strategy::ALL {
            runs.insert(s, BTreeMap::new());
        }
        for ((s, q), list) in work.iter().zip(lists) {
            runs.get_mut(s).unwrap().insert(q.qid.clone(), list?);
        }
        stores::save_runs(&dir.join(RUNS_FILE), &runs)?;
        tracing::info!(stage = "retrieve", arm = %arm.name, queries = queries.len(), "done");
        Ok(runs)
    }

    /// Ad-hoc search over an arm's indexes. Without `source` every indexed
    /// document is a candidate.
    pub fn search(&self, arm: &Arm, text: &str, strategy: Strategy, source: Option<BTreeSet<String>>, k: usize) -> Result<RankedList> {
        let (sparse, dense) = self.load_indexes(&self.arm_dir(arm, 0))?;
        let source = source.unwrap_or_else(|| sparse.docs().map(|d| d.pid).collect());
        let Some(any) = source.iter().next().cloned() else {
            return Ok(RankedList::new("adhoc", strategy, Vec::new()));
        };
        let query = Query {
            qid: "adhoc".into(),
            query: kap_core::text::nfc(text),
            ground_truth: [any].into_iter().collect(),
            source,
            category: Category::Faq,
            origin: None,
        };
        let embedder = self.embedder()?;
        let indexes = Indexes { sparse: &sparse, dense: &dense, embedder: &embedder };
        Ok(retrieve(&query, strategy, &indexes, &self.cfg.fusion_params(), k)?)
    }

    fn row_settings(&self, embedder: String) -> RowSettings {
        RowSettings {
            depth: self.cfg.eval.depth,
            counter: CjkWordCounter.label(),
            embedder,
            fusion: self.cfg.fusion_params(),
            k1: self.cfg.bm25.k1,
            b: self.cfg.bm25.b,
            repeats: self.cfg.eval.repeats,
        }
    }

    /// Scores the run files of `arms` and writes the report.
    pub fn evaluate(&self, arms: &[Arm], queries: &[Query], failures: BTreeMap<String, String>) -> Result<Report> {
        let mut rows = Vec::new();
        for arm in arms {
            let mut per_strategy: BTreeMap<Strategy, Vec<kap_core::ReportRow>> = BTreeMap::new();
            let mut embedder = String::new();
            for r in 0..self.cfg.eval.repeats {
                let dir = self.arm_dir(arm, r);
                let runs = stores::load_runs(&dir.join(RUNS_FILE))?;
                if r == 0 {
                    embedder = stores::load_vectors(&dir.join(VECTORS_FILE))?.fingerprint().to_string();
                }
                for s in Strategy::ALL {
                    let lists = runs.get(&s).ok_or_else(|| kap_core::Error::MissingRun(format!("{}/{s}", arm.name)))?;
                    per_strategy.entry(s).or_default().push(evaluate(&arm.name, s, lists, queries, self.cfg.eval.depth)?);
                }
            }
            for s in Strategy::ALL {
                let settings = self.row_settings(embedder.clone());
                rows.push(RowRecord::from_repeats(&arm.name, &arm.display_name, &per_strategy[&s], settings, queries)?);
            }
        }
        let report = Report {
            format: REPORT_FORMAT.into(),
            resolved_config: serde_json::to_value(&self.cfg).expect("config serializes"),
            queries: QueryCounts::of(queries),
            rows,
            failures,
        };
        report.write(&self.output_dir())?;
        Ok(report)
    }

    /// Enhance, chunk, index and retrieve for one arm.
    pub fn run_column(&self, arm: &Arm, repeat: usize, queries: &[Query]) -> Result<()> {
        self.enhance(arm, repeat)?;
        self.chunk(arm, repeat)?;
        self.index(arm, repeat)?;
        self.retrieve_all(arm, repeat, queries)?;
        Ok(())
    }

    /// Every configured arm under every strategy. Arms run one after the
    /// other; a failing arm is recorded and the rest carry on.
    pub fn matrix(&self) -> Result<MatrixOutcome> {
        let queries = self.load_questions()?;
        let mut done = Vec::new();
        let mut failures = BTreeMap::new();
        let mut first_error = None;
        for &preset in &self.cfg.eval.presets {
            let arm = self.cfg.preset_arm(preset);
            let result = (0..self.cfg.eval.repeats).try_for_each(|r| self.run_column(&arm, r, &queries));
            match result {
                Ok(()) => done.push(arm),
                Err(e) => {
                    tracing::error!(stage = "matrix", arm = %arm.name, "{e}");
                    failures.insert(arm.name.clone(), e.to_string());
                    first_error.get_or_insert(e);
                }
            }
        }
        let report = self.evaluate(&done, &queries, failures)?;
        Ok(MatrixOutcome { report, first_error })
    }

    /// Adds nine variants per original question and writes the result.
    pub fn augment(&self, out: &Path) -> Result<Vec<Query>> {
        let queries = self.load_questions()?;
        let gw = self.gateway(&self.augment_cache);
        let all = augment_questions(&queries, &gw, &self.cfg.enhance.model_id, self.cfg.parallelism)?;
        ingest::save_questions(out, &all)?;
        tracing::info!(stage = "augment", total = all.len(), "done");
        Ok(all)
    }

    /// Stores recorded responses under the keys the pipeline will look up.
    /// Ignores the provider mode: priming always writes.
    pub fn prime(&self, responses: &Path) -> Result<PrimeSummary> {
        let root = cache_root(&self.cfg);
        let enhance_cache = ReplayCache::open(root.join("enhance"), false)?;
        let augment_cache = ReplayCache::open(root.join("augment"), false)?;
        let mut store = None;
        let mut questions = None;
        let mut summary = PrimeSummary::default();
        for (line, v) in jsonl::read_values(responses)? {
            match jsonl::decode::<Response>(responses, line, v)? {
                Response::Page { preset, pid, page_no, text } => {
                    let store = match &store {
                        Some(s) => s,
                        None => store.insert(self.load_corpus()?),
                    };
                    let page = store.documents.get(&pid).and_then(|d| d.pages.iter().find(|p| p.page_no == page_no)).ok_or_else(|| {
                        KapError::Malformed { path: responses.into(), line, message: format!("no page {page_no} of {pid:?} in the corpus") }
                    })?;
                    let Some(config) = self.cfg.preset_arm(preset).config else {
                        return Err(KapError::Malformed {
                            path: responses.into(),
                            line,
                            message: "the baseline needs no responses".into(),
                        });
                    };
                    if let Some(p) = enhance::prepare(&pid, page, &config, &self.corpus_root())? {
                        enhance_cache.put(&p.entry, &text)?;
                        summary.pages += 1;
                    }
                }
                Response::Variant { qid, strategy, text } => {
                    let qs = match &questions {
                        Some(q) => q,
                        None => questions.insert(self.load_questions()?),
                    };
                    let original: &Query = qs.iter().find(|q| q.qid == qid && q.is_original()).ok_or_else(|| KapError::Malformed {
                        path: responses.into(),
                        line,
                        message: format!("no original question {qid:?}"),
                    })?;
                    let s = kap_core::augment::strategy(strategy).ok_or(kap_core::Error::BadStrategy { qid: qid.clone(), strategy })?;
                    let (_, entry) = prepare_variant(original, s, &self.cfg.enhance.model_id);
                    augment_cache.put(&entry, &text)?;
                    summary.variants += 1;
                }
            }
        }
        Ok(summary)
    }
}

/// Cache directory for the configured mode; mock responses live apart so
/// they can never be replayed as real ones.
pub fn cache_root(cfg: &RunConfig) -> PathBuf {
    let root = cfg.resolve(&cfg.paths.cache);
    if cfg.provider.mode == ProviderMode::Mock {
        root.join("mock")
    } else {
        root
    }
}
