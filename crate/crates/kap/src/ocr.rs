//! External OCR engine adapter.
//!
//! The engine is any program driven by a command template containing
//! `{input}` (page image) and `{output}` (text file the engine must write),
//! for example `sh -c "tesseract {input} stdout -l chi_tra > {output}"`.
//! The template is split like a shell word list but is not run through a
//! shell; the environment is inherited unchanged.

use std::fs;
use std::path::Path;
use std::process::Command;

use kap_core::text::nfc;
use kap_core::Page;

use crate::error::{KapError, Result};
use crate::ingest::CorpusStore;
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcrCommand {
    argv: Vec<String>,
}

impl OcrCommand {
    pub fn parse(template: &str) -> Result<Self> {
        let argv = shell_words::split(template).map_err(|e| KapError::Config(vec![format!("OCR command template: {e}")]))?;
        let mut problems = Vec::new();
        if argv.is_empty() {
            problems.push("OCR command template is empty".to_string());
        }
        for ph in ["{input}", "{output}"] {
            if !argv.iter().any(|a| a.contains(ph)) {
                problems.push(format!("OCR command template lacks the {ph} placeholder"));
            }
        }
        if problems.is_empty() {
            Ok(Self { argv })
        } else {
            Err(KapError::Config(problems))
        }
    }

    fn render(&self, input: &Path, output: &Path) -> Vec<String> {
        let (i, o) = (input.to_string_lossy(), output.to_string_lossy());
        self.argv.iter().map(|a| a.replace("{input}", &i).replace("{output}", &o)).collect()
    }
}

/// Trailing whitespace collapses to a single newline; blank output is empty.
fn normalize_output(text: &str) -> String {
    let t = text.trim_end();
    if t.is_empty() {
        String::new()
    } else {
        format!("{}\n", nfc(t))
    }
}

/// OCRs one page image. Pages that already carry text are returned as-is
/// unless `force` is set. The image file is only ever read.
pub fn run_external_ocr(page: &Page, pid: &str, root: &Path, engine: &OcrCommand, force: bool) -> Result<Page> {
    let Some(image_ref) = &page.image_ref else {
        return Err(KapError::NoImage { pid: pid.to_string(), page_no: page.page_no });
    };
    if !force && page.ocr_text.as_deref().is_some_and(|t| !t.trim().is_empty()) {
        return Ok(page.clone());
    }
    let input = root.join(image_ref);
    let work = tempfile::tempdir().map_err(|e| KapError::io(std::env::temp_dir(), e))?;
    let output = work.path().join("page.txt");
    let argv = engine.render(&input, &output);
    let result = Command::new(&argv[0])
        .args(&argv[1..])
        .output()
        .map_err(|e| KapError::OcrEngineFailed { code: None, stderr: format!("{}: {e}", argv[0]) })?;
    if !result.status.success() {
        return Err(KapError::OcrEngineFailed { code: result.status.code(), stderr: String::from_utf8_lossy(&result.stderr).into_owned() });
    }
    let bytes = match fs::read(&output) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(KapError::OcrOutputMissing(output)),
        Err(e) => return Err(KapError::io(&output, e)),
    };
    let text = String::from_utf8(bytes).map_err(|_| KapError::OcrNotUtf8(output.clone()))?;
    Ok(Page { ocr_text: Some(normalize_output(&text)), ..page.clone() })
}

/// OCRs every page that has an image, `workers` pages at a time.
pub fn ocr_corpus(store: &CorpusStore, root: &Path, engine: &OcrCommand, force: bool, workers: usize) -> Result<CorpusStore> {
    let work: Vec<(String, usize)> = store
        .documents
        .values()
        .flat_map(|d| d.pages.iter().enumerate().filter(|(_, p)| p.image_ref.is_some()).map(|(i, _)| (d.pid.clone(), i)))
        .collect();
    let results = par::map(&work, workers, |(pid, i)| {
        let page = &store.documents[pid].pages[*i];
        run_external_ocr(page, pid, root, engine, force)
    });
    let mut out = store.clone();
    let mut failures = Vec::new();
    for ((pid, i), r) in work.iter().zip(results) {
        match r {
            Ok(page) => out.documents.get_mut(pid).unwrap().pages[*i] = page,
            Err(e) => failures.push(format!("{pid} page {}: {e}", i + 1)),
        }
    }
    if !failures.is_empty() {
        return Err(KapError::PagesFailed(failures));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(image: Option<&str>, text: Option<&str>) -> Page {
        Page { page_no: 1, ocr_text: text.map(String::from), image_ref: image.map(String::from) }
    }

    #[test]
    fn template_needs_placeholders() {
        assert!(OcrCommand::parse("tesseract {input} {output}").is_ok());
        match OcrCommand::parse("tesseract {input}") {
            Err(KapError::Config(v)) => assert_eq!(v.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stub_engine_output_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("p.png"), b"img").unwrap();
        let engine = OcrCommand::parse("sh -c 'printf \"營業收入 1O0  \\n\\n\" > \"$1\"' sh {output} {input}").unwrap();
        let out = run_external_ocr(&page(Some("p.png"), None), "F001", dir.path(), &engine, false).unwrap();
        assert_eq!(out.ocr_text.as_deref(), Some("營業收入 1O0\n"));
        assert_eq!(fs::read(dir.path().join("p.png")).unwrap(), b"img");
    }

    #[test]
    fn engine_failure_propagates_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let engine = OcrCommand::parse("sh -c 'echo boom >&2; exit 1' sh {input} {output}").unwrap();
        match run_external_ocr(&page(Some("p.png"), None), "F001", dir.path(), &engine, false) {
            Err(KapError::OcrEngineFailed { code: Some(1), stderr }) => assert_eq!(stderr.trim(), "boom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_output_and_bad_utf8() {
        let dir = tempfile::tempdir().unwrap();
        let engine = OcrCommand::parse("true {input} {output}").unwrap();
        assert!(matches!(
            run_external_ocr(&page(Some("p.png"), None), "F001", dir.path(), &engine, false),
            Err(KapError::OcrOutputMissing(_))
        ));
        let engine = OcrCommand::parse("sh -c 'printf \"\\377\\376\" > \"$1\"' sh {output} {input}").unwrap();
        assert!(matches!(run_external_ocr(&page(Some("p.png"), None), "F001", dir.path(), &engine, false), Err(KapError::OcrNotUtf8(_))));
    }

    #[test]
    fn no_image_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let engine = OcrCommand::parse("sh -c 'printf new > \"$1\"' sh {output} {input}").unwrap();
        assert!(matches!(
            run_external_ocr(&page(None, Some("x")), "F009", dir.path(), &engine, false),
            Err(KapError::NoImage { page_no: 1, .. })
        ));
        let p = page(Some("p.png"), Some("old"));
        assert_eq!(run_external_ocr(&p, "F001", dir.path(), &engine, false).unwrap().ocr_text.as_deref(), Some("old"));
        assert_eq!(run_external_ocr(&p, "F001", dir.path(), &engine, true).unwrap().ocr_text.as_deref(), Some("new\n"));
    }
}
