//! Corpus stores and question files.
//!
//! A corpus store is a directory:
//!
//! ```text
//! manifest.json          {"schema_version": 1, "counts": {"finance": 12}}
//! docs/<pid>.jsonl       {"pid": "F001", "category": "finance"}
//!                        {"page_no": 1, "ocr_text": "...", "image_ref": "images/F001-1.png"}
//!                        ...
//! ```
//!
//! The first line of each document file is its header; every following
//! line is one page. All text is NFC-normalized on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use kap_core::text::nfc;
use kap_core::types::validate_questions;
use kap_core::{Category, Document, Page, Query};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{KapError, Result};
use crate::jsonl;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DOCS_DIR: &str = "docs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub counts: BTreeMap<Category, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStore {
    pub documents: BTreeMap<String, Document>,
    pub manifest: Manifest,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocHeader {
    pid: String,
    category: Category,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageRecord {
    page_no: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ocr_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_ref: Option<String>,
}

impl CorpusStore {
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut documents = BTreeMap::new();
        for doc in docs {
            doc.validate()?;
            if documents.contains_key(&doc.pid) {
                return Err(kap_core::Error::DuplicatePid(doc.pid).into());
            }
            documents.insert(doc.pid.clone(), doc);
        }
        let manifest = Manifest { schema_version: SCHEMA_VERSION, counts: count_categories(&documents) };
        Ok(Self { documents, manifest })
    }

    pub fn page_count(&self) -> usize {
        self.documents.values().map(|d| d.pages.len()).sum()
    }

    pub fn pages(&self) -> impl Iterator<Item = (&Document, &Page)> {
        self.documents.values().flat_map(|d| d.pages.iter().map(move |p| (d, p)))
    }

    pub fn pids(&self) -> BTreeSet<String> {
        self.documents.keys().cloned().collect()
    }
}

fn count_categories(docs: &BTreeMap<String, Document>) -> BTreeMap<Category, usize> {
    let mut counts = BTreeMap::new();
    for d in docs.values() {
        *counts.entry(d.category).or_default() += 1;
    }
    counts
}

/// Loads and validates a corpus store directory.
pub fn load_corpus(root: &Path) -> Result<CorpusStore> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(KapError::MissingManifest(manifest_path));
    }
    let raw = fs::read_to_string(&manifest_path).map_err(|e| KapError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| KapError::Malformed {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(KapError::Malformed {
            path: manifest_path,
            line: 1,
            message: format!("unsupported schema version {}", manifest.schema_version),
        });
    }

    let docs_dir = root.join(DOCS_DIR);
    let mut files: Vec<PathBuf> = match fs::read_dir(&docs_dir) {
        Ok(entries) => entries
            .map(|e| e.map(|e| e.path()).map_err(|err| KapError::io(&docs_dir, err)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(KapError::io(&docs_dir, e)),
    };
    files.sort();

    let mut documents = BTreeMap::new();
    for path in files {
        let doc = load_document(&path)?;
        if documents.contains_key(&doc.pid) {
            return Err(KapError::Record { path, line: 1, source: kap_core::Error::DuplicatePid(doc.pid) });
        }
        documents.insert(doc.pid.clone(), doc);
    }

    let counts = count_categories(&documents);
    if counts != manifest.counts {
        return Err(KapError::Malformed {
            path: root.join(MANIFEST_FILE),
            line: 1,
            message: format!("manifest counts {:?} do not match documents {:?}", manifest.counts, counts),
        });
    }
    Ok(CorpusStore { documents, manifest })
}

fn load_document(path: &Path) -> Result<Document> {
    let mut lines = jsonl::read_values(path)?.into_iter();
    let Some((line, header)) = lines.next() else {
        return Err(KapError::Malformed { path: path.to_path_buf(), line: 1, message: "empty document file".into() });
    };
    let header: DocHeader = jsonl::decode(path, line, header)?;
    let pid = nfc(&header.pid);
    let mut page_lines = Vec::new();
    let mut pages = Vec::new();
    for (line, value) in lines {
        let rec: PageRecord = jsonl::decode(path, line, value)?;
        page_lines.push(line);
        pages.push(Page { page_no: rec.page_no, ocr_text: rec.ocr_text.as_deref().map(nfc), image_ref: rec.image_ref });
    }
    let doc = Document { pid, category: header.category, pages };
    doc.validate().map_err(|source| {
        let line = match &source {
            kap_core::Error::EmptyPage { page_no, .. } | kap_core::Error::PageNumbering { found: page_no, .. } => {
                doc.pages.iter().position(|p| p.page_no == *page_no).map_or(1, |i| page_lines[i])
            }
            _ => 1,
        };
        KapError::Record { path: path.to_path_buf(), line, source }
    })?;
    Ok(doc)
}

/// Document file name for a pid: the pid itself when it is a plain
/// filename, otherwise its hex encoding.
fn doc_file_name(pid: &str) -> String {
    let plain = !pid.starts_with('.') && pid.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if plain {
        format!("{pid}.jsonl")
    } else {
        let hex: String = pid.bytes().map(|b| format!("{b:02x}")).collect();
        format!("pid-{hex}.jsonl")
    }
}

/// Writes the store; stale document files in `docs/` are removed.
pub fn save_corpus(store: &CorpusStore, root: &Path) -> Result<()> {
    let docs_dir = root.join(DOCS_DIR);
    fs::create_dir_all(&docs_dir).map_err(|e| KapError::io(&docs_dir, e))?;
    for entry in fs::read_dir(&docs_dir).map_err(|e| KapError::io(&docs_dir, e))? {
        let p = entry.map_err(|e| KapError::io(&docs_dir, e))?.path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            fs::remove_file(&p).map_err(|e| KapError::io(&p, e))?;
        }
    }
    for doc in store.documents.values() {
        let mut lines = vec![jsonl::to_line(&DocHeader { pid: doc.pid.clone(), category: doc.category })];
        for p in &doc.pages {
            lines.push(jsonl::to_line(&PageRecord { page_no: p.page_no, ocr_text: p.ocr_text.clone(), image_ref: p.image_ref.clone() }));
        }
        let body = lines.join("\n") + "\n";
        jsonl::write_atomic(&docs_dir.join(doc_file_name(&doc.pid)), body.as_bytes())?;
    }
    let manifest = serde_json::to_string_pretty(&store.manifest).expect("manifest serializes") + "\n";
    jsonl::write_atomic(&root.join(MANIFEST_FILE), manifest.as_bytes())
}

/// Copies every referenced page image from one store root to another,
/// keeping relative paths. A no-op when both roots are the same directory.
pub fn copy_images(store: &CorpusStore, from: &Path, to: &Path) -> Result<usize> {
    let same = match (fs::canonicalize(from), fs::canonicalize(to)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Ok(0);
    }
    let mut n = 0;
    for (_, page) in store.pages() {
        let Some(rel) = &page.image_ref else { continue };
        let (src, dst) = (from.join(rel), to.join(rel));
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| KapError::io(parent, e))?;
        }
        fs::copy(&src, &dst).map_err(|e| KapError::io(&src, e))?;
        n += 1;
    }
    Ok(n)
}

const QUERY_FIELDS: [&str; 6] = ["qid", "query", "source", "ground_truth", "category", "origin"];

/// Accepts numeric ids (as the competition files use) by rewriting them as
/// strings.
fn stringify_ids(obj: &mut serde_json::Map<String, Value>) {
    let fix = |v: &mut Value| {
        if let Value::Number(n) = v {
            *v = Value::String(n.to_string());
        }
    };
    if let Some(v) = obj.get_mut("qid") {
        fix(v);
    }
    for key in ["source", "ground_truth"] {
        if let Some(Value::Array(items)) = obj.get_mut(key) {
            items.iter_mut().for_each(fix);
        }
    }
    if let Some(Value::Object(origin)) = obj.get_mut("origin") {
        if let Some(v) = origin.get_mut("parent") {
            fix(v);
        }
    }
}

/// Loads a question file. Unknown fields are an error under `strict` and a
/// warning otherwise.
pub fn load_questions(path: &Path, strict: bool) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, value) in jsonl::read_values(path)? {
        let Value::Object(mut obj) = value else {
            return Err(KapError::Malformed { path: path.into(), line, message: "expected an object".into() });
        };
        let unknown: Vec<String> = obj.keys().filter(|k| !QUERY_FIELDS.contains(&k.as_str())).cloned().collect();
        if !unknown.is_empty() {
            if strict {
                return Err(KapError::Malformed { path: path.into(), line, message: format!("unknown field(s) {unknown:?}") });
            }
            tracing::warn!(stage = "ingest", locus = %format!("{}:{line}", path.display()), "ignoring unknown field(s) {unknown:?}");
            unknown.iter().for_each(|k| {
                obj.remove(k);
            });
        }
        if let Some(Value::String(cat)) = obj.get("category") {
            cat.parse::<Category>().map_err(|source| KapError::Record { path: path.into(), line, source })?;
        }
        stringify_ids(&mut obj);
        let mut q: Query = jsonl::decode(path, line, Value::Object(obj))?;
        q.query = nfc(&q.query);
        q.validate().map_err(|source| KapError::Record { path: path.into(), line, source })?;
        if !seen.insert(q.qid.clone()) {
            return Err(KapError::Record { path: path.into(), line, source: kap_core::Error::DuplicateQid(q.qid) });
        }
        queries.push(q);
    }
    Ok(queries)
}

pub fn save_questions(path: &Path, queries: &[Query]) -> Result<()> {
    validate_questions(queries)?;
    jsonl::write(path, queries)
}
