//! Declarative run configuration (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//! Precedence: built-in defaults, then the file, then `KAP_CACHE_DIR`,
//! then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use kap_core::chunk::SplitMode;
use kap_core::fusion::FusionMethod;
use kap_core::prompt::{DEFAULT_MODEL, PROMPT_VERSION};
use kap_core::{Bm25Params, ChunkParams, EnhanceConfig, FusionParams, Preset};
use serde::{Deserialize, Serialize};

use crate::error::{KapError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const CACHE_DIR_ENV: &str = "KAP_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Live,
    /// Cache hits only; any miss is an error and the network is never used.
    #[default]
    ReplayOnly,
    /// Deterministic in-process echo provider with its own cache namespace.
    Mock,
}

impl std::str::FromStr for ProviderMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "live" => Ok(Self::Live),
            "replay_only" => Ok(Self::ReplayOnly),
            "mock" => Ok(Self::Mock),
            _ => Err(format!("unknown provider mode {s:?} (expected live, replay_only or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub questions: PathBuf,
    pub lexicon: PathBuf,
    pub cache: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            questions: "questions.jsonl".into(),
            lexicon: "lexicon.txt".into(),
            cache: "cache".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    pub mode: ProviderMode,
    pub api_key_env: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Zero disables rate limiting.
    pub requests_per_second: f64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self { mode: ProviderMode::default(), api_key_env: "ANTHROPIC_API_KEY".into(), endpoint: None, requests_per_second: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceSettings {
    /// Arm used by single-stage commands.
    pub preset: Preset,
    /// Explicit flags; any of them set turns the arm into `custom`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_vision: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_ocr_text: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_rewrite: Option<bool>,
    pub model_id: String,
    pub max_retries: u32,
    pub prompt_version: String,
}

impl Default for EnhanceSettings {
    fn default() -> Self {
        Self {
            preset: Preset::Full,
            use_vision: None,
            use_ocr_text: None,
            use_rewrite: None,
            model_id: DEFAULT_MODEL.into(),
            max_retries: 3,
            prompt_version: PROMPT_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSettings {
    pub size: usize,
    pub overlap: usize,
    pub split: SplitMode,
}

impl Default for ChunkSettings {
    fn default() -> Self {
        let p = ChunkParams::default();
        Self { size: p.size, overlap: p.overlap, split: p.split }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Settings {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Settings {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self { k1: p.k1, b: p.b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderBackend {
    #[default]
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSettings {
    pub backend: EmbedderBackend,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub api_key_env: String,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        Self {
            backend: EmbedderBackend::Hashed,
            dim: kap_core::HashedNgramEmbedder::DEFAULT_DIM,
            endpoint: None,
            model: None,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub method: FusionMethod,
    pub rrf_k: f64,
    pub per_list_depth: usize,
}

impl Default for FusionSettings {
    fn default() -> Self {
        let p = FusionParams::default();
        Self { method: p.method, rrf_k: p.rrf_k, per_list_depth: p.per_list_depth }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Ranking depth; gold documents below it count as misses.
    pub depth: usize,
    /// Columns of the matrix, in report order.
    pub presets: Vec<Preset>,
    pub repeats: usize,
    /// Reject unknown fields in question files.
    pub strict_questions: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { depth: kap_core::metrics::DEFAULT_DEPTH, presets: Preset::ALL.to_vec(), repeats: 1, strict_questions: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Upper bound on concurrent work items (provider calls, embeddings,
    /// queries).
    pub parallelism: usize,
    pub paths: Paths,
    pub provider: ProviderSettings,
    pub enhance: EnhanceSettings,
    pub chunk: ChunkSettings,
    pub bm25: Bm25Settings,
    pub embedder: EmbedderSettings,
    pub fusion: FusionSettings,
    pub eval: EvalSettings,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            parallelism: 4,
            paths: Paths::default(),
            provider: ProviderSettings::default(),
            enhance: EnhanceSettings::default(),
            chunk: ChunkSettings::default(),
            bm25: Bm25Settings::default(),
            embedder: EmbedderSettings::default(),
            fusion: FusionSettings::default(),
            eval: EvalSettings::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// One column of the experiment: a preset, or explicit flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arm {
    pub name: String,
    pub display_name: String,
    /// `None` skips enhancement.
    pub config: Option<EnhanceConfig>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| KapError::Config(vec![e.to_string()]))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KapError::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_DIR_ENV).filter(|d| !d.is_empty()) {
            self.paths.cache = PathBuf::from(dir);
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn chunk_params(&self) -> ChunkParams {
        ChunkParams { size: self.chunk.size, overlap: self.chunk.overlap, split: self.chunk.split }
    }

    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params { k1: self.bm25.k1, b: self.bm25.b }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams { method: self.fusion.method, rrf_k: self.fusion.rrf_k, per_list_depth: self.fusion.per_list_depth }
    }

    fn with_settings(&self, mut c: EnhanceConfig) -> EnhanceConfig {
        c.model_id = self.enhance.model_id.clone();
        c.max_retries = self.enhance.max_retries;
        c.prompt_version = self.enhance.prompt_version.clone();
        c
    }

    pub fn preset_arm(&self, preset: Preset) -> Arm {
        Arm {
            name: preset.as_str().into(),
            display_name: preset.display_name().into(),
            config: preset.config().map(|c| self.with_settings(c)),
        }
    }

    /// The arm single-stage commands work on.
    pub fn selected_arm(&self) -> Arm {
        let e = &self.enhance;
        if e.use_vision.is_none() && e.use_ocr_text.is_none() && e.use_rewrite.is_none() {
            return self.preset_arm(e.preset);
        }
        let (v, o, r) = e.preset.flags().unwrap_or((false, true, false));
        let c = EnhanceConfig::new(e.use_vision.unwrap_or(v), e.use_ocr_text.unwrap_or(o), e.use_rewrite.unwrap_or(r));
        Arm { name: "custom".into(), display_name: "Custom".into(), config: Some(self.with_settings(c)) }
    }

    /// Every violation, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!("schema_version = {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.parallelism == 0 {
            problems.push("parallelism must be at least 1".into());
        }
        if let Err(e) = self.chunk_params().validate() {
            problems.push(format!("chunk: {e}"));
        }
        if let Err(e) = self.bm25_params().validate() {
            problems.push(format!("bm25: {e}"));
        }
        if let Err(e) = self.fusion_params().validate() {
            problems.push(format!("fusion: {e}"));
        }
        if let Some(c) = &self.selected_arm().config {
            if let Err(e) = c.validate() {
                problems.push(format!("enhance: {e}"));
            }
        }
        if self.enhance.max_retries == 0 {
            problems.push("enhance: max_retries must be at least 1".into());
        }
        if self.eval.depth == 0 {
            problems.push("eval: depth must be at least 1".into());
        }
        if self.eval.repeats == 0 {
            problems.push("eval: repeats must be at least 1".into());
        }
        if self.eval.presets.is_empty() {
            problems.push("eval: presets must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.eval.presets {
            if !seen.insert(p) {
                problems.push(format!("eval: preset {p} listed twice"));
            }
        }
        if self.embedder.dim == 0 {
            problems.push("embedder: dim must be at least 1".into());
        }
        if self.embedder.backend == EmbedderBackend::Remote {
            if self.embedder.endpoint.is_none() {
                problems.push("embedder: remote backend needs an endpoint".into());
            }
            if self.embedder.model.is_none() {
                problems.push("embedder: remote backend needs a model".into());
            }
        }
        if !(self.provider.requests_per_second.is_finite() && self.provider.requests_per_second >= 0.0) {
            problems.push("provider: requests_per_second must be a non-negative number".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(KapError::Config(problems))
        }
    }
}
