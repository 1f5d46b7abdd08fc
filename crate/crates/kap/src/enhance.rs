//! Page enhancement: prompt, provider call through the replay cache,
//! response clean-up and the enhanced page store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kap_core::prompt::{build_prompt, cache_key, ImageInput};
use kap_core::text::nfc;
use kap_core::{EnhanceConfig, Page, PromptRequest};
use serde::{Deserialize, Serialize};

use crate::cache::{IndexEntry, Lookup};
use crate::error::{KapError, Result};
use crate::ingest::CorpusStore;
use crate::jsonl;
use crate::par;
use crate::provider::Gateway;

/// Fingerprint recorded on pages that bypass enhancement.
pub const BASELINE_FINGERPRINT: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Provider,
    Cache,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancedPage {
    pub pid: String,
    pub page_no: u32,
    pub config_fingerprint: String,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn media_type(path: &Path) -> Result<&'static str> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok("image/png"),
        Some("jpg" | "jpeg") => Ok("image/jpeg"),
        Some("gif") => Ok("image/gif"),
        Some("webp") => Ok("image/webp"),
        _ => Err(KapError::UnsupportedImage(path.to_path_buf())),
    }
}

fn strip_fence(t: &str) -> Option<&str> {
    let rest = t.strip_prefix("```")?;
    let body = &rest[rest.find('\n')? + 1..];
    Some(body.trim_end().strip_suffix("```").unwrap_or(body))
}

fn strip_tag(t: &str) -> Option<&str> {
    let rest = t.strip_prefix('<')?;
    let close = rest.find('>')?;
    let name = &rest[..close];
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return None;
    }
    rest[close + 1..].strip_suffix(&format!("</{name}>"))
}

/// Removes code fences or a single enclosing tag around the payload.
pub fn strip_wrapper(raw: &str) -> String {
    let mut t = raw.trim();
    while let Some(inner) = strip_fence(t).or_else(|| strip_tag(t)) {
        t = inner.trim();
    }
    nfc(t)
}

fn cleaned(pid: &str, page_no: u32) -> impl Fn(&str) -> Result<String> + '_ {
    move |raw| {
        let t = strip_wrapper(raw);
        if t.is_empty() {
            Err(KapError::EmptyEnhancement { pid: pid.to_string(), page_no })
        } else {
            Ok(t)
        }
    }
}

pub fn passthrough(pid: &str, page: &Page) -> EnhancedPage {
    EnhancedPage {
        pid: pid.to_string(),
        page_no: page.page_no,
        config_fingerprint: BASELINE_FINGERPRINT.to_string(),
        text: page.text().to_string(),
        provenance: Provenance::Passthrough,
        note: None,
    }
}

fn load_image(root: &Path, image_ref: &str) -> Result<ImageInput> {
    let path = root.join(image_ref);
    let media_type = media_type(&path)?.to_string();
    let bytes = fs::read(&path).map_err(|e| KapError::io(&path, e))?;
    Ok(ImageInput { bytes, media_type })
}

/// The provider request for one page, its cache entry and any degrade note.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub request: PromptRequest,
    pub entry: IndexEntry,
    pub note: Option<String>,
}

/// Builds the request `enhance_page` would send. `None` for an empty
/// source page, which needs no call.
pub fn prepare(pid: &str, page: &Page, config: &EnhanceConfig, corpus_root: &Path) -> Result<Option<Prepared>> {
    config.validate()?;
    let ocr = page.text();
    if ocr.trim().is_empty() && page.image_ref.is_none() {
        return Ok(None);
    }
    let mut effective = config.clone();
    let mut note = None;
    let image = match (&page.image_ref, config.use_vision) {
        (Some(r), true) => Some(load_image(corpus_root, r)?),
        (None, true) => {
            effective.use_ocr_text = true;
            note = Some("vision requested but no image; text-only".to_string());
            None
        }
        (_, false) => None,
    };
    let request = build_prompt(image, ocr, &effective);
    let entry = IndexEntry {
        key: cache_key(&request, &config.model_id, &config.prompt_version),
        pid: Some(pid.to_string()),
        page_no: Some(page.page_no),
        fingerprint: config.fingerprint(),
        ..Default::default()
    };
    Ok(Some(Prepared { request, entry, note }))
}

/// Enhances one page under `config`. Image references resolve against
/// `corpus_root`.
pub fn enhance_page(pid: &str, page: &Page, config: &EnhanceConfig, gateway: &Gateway, corpus_root: &Path) -> Result<EnhancedPage> {
    let fingerprint = config.fingerprint();
    let Some(prepared) = prepare(pid, page, config, corpus_root)? else {
        return Ok(EnhancedPage { config_fingerprint: fingerprint, note: Some("empty source page".into()), ..passthrough(pid, page) });
    };
    if let Some(note) = &prepared.note {
        tracing::warn!(stage = "enhance", pid, page_no = page.page_no, "{note}");
    }
    let (text, lookup) = gateway.call(&prepared.entry, &prepared.request, &config.model_id, cleaned(pid, page.page_no))?;
    Ok(EnhancedPage {
        pid: pid.to_string(),
        page_no: page.page_no,
        config_fingerprint: fingerprint,
        text,
        provenance: match lookup {
            Lookup::Hit => Provenance::Cache,
            Lookup::Fetched => Provenance::Provider,
        },
        note: prepared.note,
    })
}

/// Enhances every page, `workers` at a time. `None` is the baseline arm:
/// OCR text passes through untouched. Already-cached pages cost nothing,
/// so an interrupted run resumes where it stopped.
pub fn enhance_corpus(
    store: &CorpusStore,
    config: Option<&EnhanceConfig>,
    gateway: &Gateway,
    corpus_root: &Path,
    workers: usize,
) -> Result<Vec<EnhancedPage>> {
    let pages: Vec<(&str, &Page)> = store.pages().map(|(d, p)| (d.pid.as_str(), p)).collect();
    let Some(config) = config else {
        return Ok(pages.into_iter().map(|(pid, p)| passthrough(pid, p)).collect());
    };
    config.validate()?;
    let results = par::map(&pages, workers, |(pid, page)| enhance_page(pid, page, config, gateway, corpus_root));
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for ((pid, page), r) in pages.iter().zip(results) {
        match r {
            Ok(p) => out.push(p),
            Err(e) => {
                tracing::error!(stage = "enhance", pid, page_no = page.page_no, "{e}");
                failures.push(format!("{pid} page {}: {e}", page.page_no));
            }
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(KapError::PagesFailed(failures))
    }
}

/// Page texts keyed for chunking.
pub fn page_texts(pages: &[EnhancedPage]) -> BTreeMap<(String, u32), String> {
    pages.iter().map(|p| ((p.pid.clone(), p.page_no), p.text.clone())).collect()
}

pub fn save_enhanced(path: &Path, pages: &[EnhancedPage]) -> Result<()> {
    jsonl::write(path, pages)
}

pub fn load_enhanced(path: &Path) -> Result<Vec<EnhancedPage>> {
    let pages: Vec<EnhancedPage> = jsonl::read(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for (i, p) in pages.iter().enumerate() {
        if !seen.insert((p.pid.clone(), p.page_no)) {
            return Err(KapError::Malformed {
                path: PathBuf::from(path),
                line: i + 1,
                message: format!("duplicate page {} of {:?}", p.page_no, p.pid),
            });
        }
    }
    Ok(pages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::ReplayCache;
    use crate::par::RateLimiter;
    use crate::provider::{MockClient, OfflineClient, RetryPolicy};
    use kap_core::{Category, Document, Preset};

    fn store(n: u32, with_images: bool) -> CorpusStore {
        let pages = (1..=n)
            .map(|i| Page {
                page_no: i, ocr_text: Some(format!("營業收入 1O{i}")), image_ref: with_images.then(|| format!("p{i}.png"))
            })
            .collect();
        CorpusStore::from_documents([Document { pid: "F001".into(), category: Category::Finance, pages }]).unwrap()
    }

    fn root(n: u32) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=n {
            fs::write(dir.path().join(format!("p{i}.png")), [0x89, b'P', b'N', b'G', i as u8]).unwrap();
        }
        dir
    }

    fn gateway<'a>(client: &'a dyn crate::provider::ProviderClient, cache: &'a ReplayCache, limiter: &'a RateLimiter) -> Gateway<'a> {
        Gateway { sleep: |_| {}, ..Gateway::new(client, cache, limiter, RetryPolicy::default()) }
    }

    #[test]
    fn strips_wrappers() {
        assert_eq!(strip_wrapper("```text\n營業收入 100\n```\n"), "營業收入 100");
        assert_eq!(strip_wrapper("<enhanced_text>\n營業收入 100\n</enhanced_text>"), "營業收入 100");
        assert_eq!(strip_wrapper("<a>x</b>"), "<a>x</b>");
        assert_eq!(strip_wrapper("  plain  "), "plain");
    }

    #[test]
    fn mock_response_passes_through() {
        let (dir, cdir) = (root(1), tempfile::tempdir().unwrap());
        let cache = ReplayCache::open(cdir.path(), false).unwrap();
        let limiter = RateLimiter::unlimited();
        let client = MockClient::fixed("第一頁：營業收入 100");
        let gw = gateway(&client, &cache, &limiter);
        let s = store(1, true);
        let page = &s.documents["F001"].pages[0];
        let out = enhance_page("F001", page, &Preset::Full.config().unwrap(), &gw, dir.path()).unwrap();
        assert_eq!(out.text, "第一頁：營業收入 100");
        assert_eq!(out.provenance, Provenance::Provider);
        let again = enhance_page("F001", page, &Preset::Full.config().unwrap(), &gw, dir.path()).unwrap();
        assert_eq!(again.provenance, Provenance::Cache);
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn baseline_makes_no_calls() {
        let cdir = tempfile::tempdir().unwrap();
        let cache = ReplayCache::open(cdir.path(), true).unwrap();
        let limiter = RateLimiter::unlimited();
        let client = OfflineClient::default();
        let gw = gateway(&client, &cache, &limiter);
        let out = enhance_corpus(&store(3, false), None, &gw, Path::new("."), 4).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|p| p.provenance == Provenance::Passthrough));
        assert_eq!(client.attempts(), 0);
    }

    #[test]
    fn partially_primed_cache_calls_only_for_missing_pages() {
        let (dir, cdir) = (root(3), tempfile::tempdir().unwrap());
        let cache = ReplayCache::open(cdir.path(), false).unwrap();
        let limiter = RateLimiter::unlimited();
        let cfg = Preset::Full.config().unwrap();
        let s = store(3, true);

        let primer = MockClient::echo();
        let gw = gateway(&primer, &cache, &limiter);
        enhance_page("F001", &s.documents["F001"].pages[0], &cfg, &gw, dir.path()).unwrap();

        let client = MockClient::echo();
        let gw = gateway(&client, &cache, &limiter);
        let out = enhance_corpus(&s, Some(&cfg), &gw, dir.path(), 2).unwrap();
        assert_eq!(client.calls(), 2);
        assert_eq!(out[0].provenance, Provenance::Cache);

        let out2 = enhance_corpus(&s, Some(&cfg), &gw, dir.path(), 2).unwrap();
        assert_eq!(client.calls(), 2);
        assert!(out2.iter().all(|p| p.provenance == Provenance::Cache));
        assert_eq!(page_texts(&out), page_texts(&out2));
    }

    #[test]
    fn replay_only_miss_and_empty_response() {
        let (dir, cdir) = (root(1), tempfile::tempdir().unwrap());
        let s = store(1, true);
        let cfg = Preset::Full.config().unwrap();
        let limiter = RateLimiter::unlimited();

        let ro = ReplayCache::open(cdir.path(), true).unwrap();
        let offline = OfflineClient::default();
        let err = enhance_corpus(&s, Some(&cfg), &gateway(&offline, &ro, &limiter), dir.path(), 1).unwrap_err();
        assert!(err.to_string().contains("no entry"), "{err}");
        assert_eq!(offline.attempts(), 0);

        let rw = ReplayCache::open(cdir.path(), false).unwrap();
        let blank = MockClient::fixed("```\n  \n```");
        let err = enhance_page("F001", &s.documents["F001"].pages[0], &cfg, &gateway(&blank, &rw, &limiter), dir.path()).unwrap_err();
        assert!(matches!(err, KapError::EmptyEnhancement { page_no: 1, .. }));
        assert!(rw.keys().unwrap().is_empty());
    }

    #[test]
    fn missing_image_degrades_to_text() {
        let cdir = tempfile::tempdir().unwrap();
        let cache = ReplayCache::open(cdir.path(), false).unwrap();
        let limiter = RateLimiter::unlimited();
        let client = MockClient::echo();
        let s = store(1, false);
        let cfg = Preset::NoOcrText.config().unwrap();
        let out = enhance_page("F001", &s.documents["F001"].pages[0], &cfg, &gateway(&client, &cache, &limiter), Path::new(".")).unwrap();
        assert_eq!(out.text, "營業收入 1O1");
        assert!(out.note.is_some());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pages = vec![passthrough("F001", &store(1, false).documents["F001"].pages[0])];
        let path = dir.path().join("enhanced.jsonl");
        save_enhanced(&path, &pages).unwrap();
        assert_eq!(load_enhanced(&path).unwrap(), pages);
    }
}
