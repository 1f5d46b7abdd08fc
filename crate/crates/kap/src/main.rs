use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use kap_core::chunk::SplitMode;
use kap_core::fusion::Strategy;
use kap_core::{Preset, PromptRequest};

use kap::config::{ProviderMode, RunConfig};
use kap::error::{KapError, ProviderError, Result};
use kap::ingest;
use kap::ocr::{ocr_corpus, OcrCommand};
use kap::pipeline::Pipeline;
use kap::provider::{AnthropicClient, MockClient, OfflineClient, ProviderClient};
use kap::report::render_tables;

/// Post-OCR enhancement and retrieval evaluation for scanned documents.
#[derive(Debug, Parser)]
#[command(name = "kap", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings that override the config file.
#[derive(Debug, Args)]
struct Overrides {
    /// Run configuration (TOML). Defaults apply when absent.
    #[arg(long, short = 'c', global = true, env = "KAP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    questions: Option<PathBuf>,
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// live, replay_only or mock.
    #[arg(long, global = true)]
    provider: Option<ProviderMode>,
    /// Global bound on concurrent work items.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Enhancement arm for single-stage commands.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    use_vision: Option<bool>,
    #[arg(long, global = true)]
    use_ocr_text: Option<bool>,
    #[arg(long, global = true)]
    use_rewrite: Option<bool>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    #[arg(long, global = true)]
    overlap: Option<usize>,
    /// fixed or recursive.
    #[arg(long, global = true, value_parser = parse_split)]
    split: Option<SplitMode>,
    #[arg(long, global = true)]
    k1: Option<f64>,
    #[arg(long, global = true)]
    b: Option<f64>,
    #[arg(long, global = true)]
    rrf_k: Option<f64>,
    #[arg(long, global = true)]
    per_list_depth: Option<usize>,
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// Comma-separated matrix columns.
    #[arg(long, global = true, value_delimiter = ',')]
    presets: Option<Vec<Preset>>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Warn about unknown question fields instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
    /// Log filter, e.g. `info` or `kap=debug`.
    #[arg(long, global = true, env = "KAP_LOG", default_value = "info")]
    log: String,
}

fn parse_split(s: &str) -> std::result::Result<SplitMode, String> {
    match s {
        "fixed" => Ok(SplitMode::Fixed),
        "recursive" => Ok(SplitMode::Recursive),
        _ => Err(format!("unknown split mode {s:?} (expected fixed or recursive)")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the corpus store and question file; optionally write a
    /// normalized copy of the store.
    Ingest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an external OCR engine over page images.
    Ocr {
        /// Command template with {input} and {output} placeholders.
        #[arg(long)]
        engine: String,
        /// Re-OCR pages that already have text.
        #[arg(long)]
        force: bool,
        /// Store to write; images are copied alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance every page under the selected arm.
    Enhance,
    /// Generate nine reformulations per original question.
    Augment {
        /// Defaults to `<output>/questions.augmented.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split enhanced pages into overlapping windows.
    Chunk,
    /// Build the BM25 and vector indexes.
    Index,
    /// Rank documents for an ad-hoc query, or for every question when no
    /// query is given (writes the run file).
    Search {
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value = "hybrid")]
        strategy: Strategy,
        /// Comma-separated candidate pids; all indexed documents by default.
        #[arg(long, value_delimiter = ',')]
        source: Option<Vec<String>>,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Score run files and write the report.
    Eval,
    /// Every arm under every strategy, end to end.
    Matrix,
    /// Store recorded responses in the replay cache.
    Prime {
        #[arg(long, required = true)]
        responses: Vec<PathBuf>,
    },
}

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    // Flag paths are relative to the working directory, not the config file.
    let cwd = |p: &PathBuf| std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.clone());
    let (corpus, questions, lexicon, cache, output) = (
        o.corpus.as_ref().map(cwd),
        o.questions.as_ref().map(cwd),
        o.lexicon.as_ref().map(cwd),
        o.cache.as_ref().map(cwd),
        o.output.as_ref().map(cwd),
    );
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(corpus => cfg.paths.corpus);
    set!(questions => cfg.paths.questions);
    set!(lexicon => cfg.paths.lexicon);
    set!(cache => cfg.paths.cache);
    set!(output => cfg.paths.output);
    set!(o.provider => cfg.provider.mode);
    set!(o.parallelism => cfg.parallelism);
    set!(o.preset => cfg.enhance.preset);
    set!(o.model.clone() => cfg.enhance.model_id);
    set!(o.chunk_size => cfg.chunk.size);
    set!(o.overlap => cfg.chunk.overlap);
    set!(o.split => cfg.chunk.split);
    set!(o.k1 => cfg.bm25.k1);
    set!(o.b => cfg.bm25.b);
    set!(o.rrf_k => cfg.fusion.rrf_k);
    set!(o.per_list_depth => cfg.fusion.per_list_depth);
    set!(o.depth => cfg.eval.depth);
    set!(o.presets.clone() => cfg.eval.presets);
    set!(o.repeats => cfg.eval.repeats);
    if o.use_vision.is_some() {
        cfg.enhance.use_vision = o.use_vision;
    }
    if o.use_ocr_text.is_some() {
        cfg.enhance.use_ocr_text = o.use_ocr_text;
    }
    if o.use_rewrite.is_some() {
        cfg.enhance.use_rewrite = o.use_rewrite;
    }
    if o.lenient {
        cfg.eval.strict_questions = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Stands in for the live client when it could not be built, so that
/// stages which never call the provider still run.
struct Unavailable(ProviderError);

impl ProviderClient for Unavailable {
    fn complete(&self, _: &PromptRequest, _: &str) -> std::result::Result<String, ProviderError> {
        Err(self.0.clone())
    }
}

fn make_client(cfg: &RunConfig) -> Box<dyn ProviderClient> {
    match cfg.provider.mode {
        ProviderMode::ReplayOnly => Box::new(OfflineClient::default()),
        ProviderMode::Mock => Box::new(MockClient::echo()),
        ProviderMode::Live => match AnthropicClient::from_env(&cfg.provider.api_key_env, cfg.provider.endpoint.as_deref()) {
            Ok(c) => Box::new(c),
            Err(e) => Box::new(Unavailable(e)),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.overrides)?;
    let client = make_client(&cfg);
    let pipeline = Pipeline::new(cfg, client.as_ref())?;
    let arm = pipeline.cfg.selected_arm();
    let mut stdout = std::io::stdout().lock();
    let out_err = |e: std::io::Error| KapError::io("<stdout>", e);
    match cli.command {
        Command::Ingest { out } => {
            let store = pipeline.load_corpus()?;
            let qpath = pipeline.cfg.resolve(&pipeline.cfg.paths.questions);
            let questions = if qpath.exists() { Some(pipeline.load_questions()?) } else { None };
            writeln!(stdout, "documents {}  pages {}", store.documents.len(), store.page_count()).map_err(out_err)?;
            for (cat, n) in &store.manifest.counts {
                writeln!(stdout, "  {cat:<10} {n}").map_err(out_err)?;
            }
            if let Some(q) = &questions {
                let orig = q.iter().filter(|q| q.is_original()).count();
                writeln!(stdout, "questions {} ({orig} original, {} augmented)", q.len(), q.len() - orig).map_err(out_err)?;
            }
            if let Some(out) = out {
                ingest::save_corpus(&store, &out)?;
                ingest::copy_images(&store, &pipeline.corpus_root(), &out)?;
            }
        }
        Command::Ocr { engine, force, out } => {
            let engine = OcrCommand::parse(&engine)?;
            let store = pipeline.load_corpus()?;
            let root = pipeline.corpus_root();
            let done = ocr_corpus(&store, &root, &engine, force, pipeline.cfg.parallelism)?;
            ingest::save_corpus(&done, &out)?;
            ingest::copy_images(&done, &root, &out)?;
        }
        Command::Enhance => {
            let pages = pipeline.enhance(&arm, 0)?;
            writeln!(stdout, "{}: {} pages enhanced", arm.name, pages.len()).map_err(out_err)?;
        }
        Command::Augment { out } => {
            let out = out.unwrap_or_else(|| pipeline.output_dir().join("questions.augmented.jsonl"));
            let all = pipeline.augment(&out)?;
            writeln!(stdout, "{} questions written to {}", all.len(), out.display()).map_err(out_err)?;
        }
        Command::Chunk => {
            let chunks = pipeline.chunk(&arm, 0)?;
            writeln!(stdout, "{}: {} chunks", arm.name, chunks.len()).map_err(out_err)?;
        }
        Command::Index => {
            pipeline.index(&arm, 0)?;
            writeln!(stdout, "{}: indexes written", arm.name).map_err(out_err)?;
        }
        Command::Search { query, strategy, source, k } => {
            let k = k.unwrap_or(pipeline.cfg.eval.depth);
            match query {
                Some(q) => {
                    let source = source.map(|s| s.into_iter().collect::<BTreeSet<_>>());
                    let list = pipeline.search(&arm, &q, strategy, source, k)?;
                    for (i, hit) in list.items.iter().enumerate() {
                        writeln!(stdout, "{}\t{}\t{:.6}", i + 1, hit.id, hit.score).map_err(out_err)?;
                    }
                }
                None => {
                    let queries = pipeline.load_questions()?;
                    pipeline.retrieve_all(&arm, 0, &queries)?;
                    writeln!(stdout, "{}: runs written for {} questions", arm.name, queries.len()).map_err(out_err)?;
                }
            }
        }
        Command::Eval => {
            let queries = pipeline.load_questions()?;
            let arms: Vec<_> = pipeline.cfg.eval.presets.iter().map(|&p| pipeline.cfg.preset_arm(p)).collect();
            let report = pipeline.evaluate(&arms, &queries, Default::default())?;
            write!(stdout, "{}", render_tables(&report)).map_err(out_err)?;
        }
        Command::Matrix => {
            let outcome = pipeline.matrix()?;
            write!(stdout, "{}", render_tables(&outcome.report)).map_err(out_err)?;
            if let Some(e) = outcome.first_error {
                return Err(e);
            }
        }
        Command::Prime { responses } => {
            for path in responses {
                let s = pipeline.prime(&path)?;
                writeln!(stdout, "{}: {} page responses, {} variants", path.display(), s.pages, s.variants).map_err(out_err)?;
            }
        }
    }
    Ok(())
}

fn main() -> process::ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return process::ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.overrides.log).unwrap_or_else(|_| "info".into()))
        .init();
    match run(cli) {
        Ok(()) => process::ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e}");
            eprintln!("error: {e}");
            process::ExitCode::from(e.exit_code() as u8)
        }
    }
}
