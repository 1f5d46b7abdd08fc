//! Page-first chunking with token windows and overlap.
//!
//! Pages are never merged: every page is cut into windows of at most
//! `size` tokens, consecutive windows sharing exactly `overlap` tokens. A
//! token owns the whitespace that follows it (the first token also owns any
//! leading whitespace), so the windows partition the page text and chunk
//! text is always an exact substring of the page.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{classify, CharClass};

/// Splits text into tokens. Implementations must be deterministic and
/// return ascending, non-overlapping byte spans that cover every
/// non-whitespace character.
pub trait TokenCounter {
    fn name(&self) -> &str;
    fn version(&self) -> u32;
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }

    /// `name@version`, recorded in chunk stores and reports.
    fn label(&self) -> String {
        format!("{}@{}", self.name(), self.version())
    }
}

/// One token per CJK codepoint, one per maximal run of other letters and
/// digits, one per punctuation character. Whitespace only separates.
#[derive(Debug, Clone, Copy, Default)]
pub struct CjkWordCounter;

impl TokenCounter for CjkWordCounter {
    fn name(&self) -> &str {
        "cjk-word"
    }

    fn version(&self) -> u32 {
        1
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            let class = classify(c);
            if class == CharClass::Word {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(s) = word_start.take() {
                spans.push(s..i);
            }
            if class != CharClass::Space {
                spans.push(i..i + c.len_utf8());
            }
        }
        if let Some(s) = word_start {
            spans.push(s..text.len());
        }
        spans
    }
}

/// Where a window may end when it cannot take the rest of the page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Always cut at exactly `size` tokens.
    Fixed,
    /// Pull the cut back to the last blank line, else the last line break,
    /// found in the back half of the window; fall back to `size` tokens.
    #[default]
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub size: usize,
    pub overlap: usize,
    #[serde(default)]
    pub split: SplitMode,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self { size: 8000, overlap: 500, split: SplitMode::default() }
    }
}

impl ChunkParams {
    pub fn new(size: usize, overlap: usize) -> Self {
        Self { size, overlap, split: SplitMode::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.overlap >= self.size {
            return Err(Error::InvalidChunkParams { size: self.size, overlap: self.overlap });
        }
        Ok(())
    }
}

/// A window over one page, in token units of the active counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkBody {
    pub token_start: usize,
    pub token_end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub pid: String,
    pub page_start: u32,
    pub page_end: u32,
    pub token_start: usize,
    pub token_end: usize,
    pub text: String,
}

/// `{pid}#p{start}-{end}#{ordinal}`. The suffix has a fixed shape, so ids
/// parse unambiguously from the right whatever the pid contains.
pub fn chunk_id(pid: &str, page_start: u32, page_end: u32, ordinal: usize) -> String {
    format!("{pid}#p{page_start}-{page_end}#{ordinal}")
}

/// Token window boundaries for a page of `spans.len()` tokens.
fn windows(text: &str, spans: &[Range<usize>], params: &ChunkParams) -> Vec<Range<usize>> {
    let n = spans.len();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut start = 0;
    loop {
        let mut end = (start + params.size).min(n);
        if end < n && params.split == SplitMode::Recursive {
            end = snap_end(text, spans, start, end, params);
        }
        out.push(start..end);
        if end == n {
            break;
        }
        start = end - params.overlap;
    }
    out
}

fn snap_end(text: &str, spans: &[Range<usize>], start: usize, end: usize, params: &ChunkParams) -> usize {
    // Keeps every window longer than the overlap, so the walk always advances.
    let lo = start + (params.overlap + 1).max(params.size.div_ceil(2));
    let newlines = |e: usize| text[spans[e - 1].end..spans[e].start].matches('\n').count();
    let mut line_break = None;
    for e in (lo..=end).rev() {
        match newlines(e) {
            0 => {}
            1 => {
                line_break.get_or_insert(e);
            }
            _ => return e,
        }
    }
    line_break.unwrap_or(end)
}

/// Cuts one page into overlapping token windows.
pub fn chunk_page<C: TokenCounter + ?Sized>(text: &str, params: &ChunkParams, counter: &C) -> Result<Vec<ChunkBody>> {
    params.validate()?;
    let spans = counter.token_spans(text);
    let n = spans.len();
    let piece_start = |i: usize| if i == 0 { 0 } else { spans[i].start };
    let piece_end = |i: usize| if i + 1 == n { text.len() } else { spans[i + 1].start };
    Ok(windows(text, &spans, params)
        .into_iter()
        .map(|w| ChunkBody { token_start: w.start, token_end: w.end, text: text[piece_start(w.start)..piece_end(w.end - 1)].to_string() })
        .collect())
}

/// Chunks every page independently, in (pid, page_no, ordinal) order.
pub fn chunk_corpus<C: TokenCounter + ?Sized>(
    pages: &BTreeMap<(String, u32), String>,
    params: &ChunkParams,
    counter: &C,
) -> Result<Vec<Chunk>> {
    params.validate()?;
    let mut out = Vec::new();
    for ((pid, page_no), text) in pages {
        for (ordinal, body) in chunk_page(text, params, counter)?.into_iter().enumerate() {
            out.push(Chunk {
                chunk_id: chunk_id(pid, *page_no, *page_no, ordinal),
                pid: pid.clone(),
                page_start: *page_no,
                page_end: *page_no,
                token_start: body.token_start,
                token_end: body.token_end,
                text: body.text,
            });
        }
    }
    Ok(out)
}
