//! Greedy forward longest-match word segmentation over a lexicon.
//!
//! At a CJK position the longest lexicon entry starting there wins; a CJK
//! codepoint that starts no entry becomes its own term. Runs of other
//! letters and digits become one lowercased term. Whitespace and
//! punctuation separate terms and are dropped.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::hash::FramedHasher;
use crate::text::{classify, nfc, CharClass};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeSet<String>,
    /// Longest entry, in codepoints.
    max_entry_len: usize,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Lexicon::default();
        for w in words {
            let w = nfc(w.as_ref());
            if w.is_empty() {
                continue;
            }
            if w.chars().any(char::is_whitespace) {
                return Err(Error::LexiconWhitespace(w));
            }
            lex.max_entry_len = lex.max_entry_len.max(w.chars().count());
            lex.entries.insert(w);
        }
        Ok(lex)
    }

    /// Parses the lexicon file format: one word per line, `#` comments,
    /// blank lines ignored, surrounding whitespace trimmed.
    pub fn parse(src: &str) -> Result<Self> {
        Self::new(src.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_entry_len(&self) -> usize {
        self.max_entry_len
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    /// Content hash over the sorted entries; serialized indexes carry it.
    pub fn fingerprint(&self) -> String {
        self.entries.iter().fold(FramedHasher::new(), |h, w| h.field(w.as_bytes())).finish_hex()
    }
}

/// A segmented term and the byte span of the input it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub span: Range<usize>,
    pub text: String,
}

pub fn segment_spans(text: &str, lexicon: &Lexicon) -> Vec<Term> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        match classify(c) {
            CharClass::Space | CharClass::Punct => i += 1,
            CharClass::Word => {
                let mut j = i + 1;
                while j < chars.len() && classify(chars[j].1) == CharClass::Word {
                    j += 1;
                }
                let span = start..byte_at(j);
                out.push(Term { text: text[span.clone()].to_lowercase(), span });
                i = j;
            }
            CharClass::Cjk => {
                let longest = lexicon.max_entry_len.min(chars.len() - i);
                let len = (2..=longest).rev().find(|&n| lexicon.contains(&text[start..byte_at(i + n)])).unwrap_or(1);
                let span = start..byte_at(i + len);
                out.push(Term { text: text[span.clone()].into(), span });
                i += len;
            }
        }
    }
    out
}

pub fn segment(text: &str, lexicon: &Lexicon) -> Vec<String> {
    segment_spans(text, lexicon).into_iter().map(|t| t.text).collect()
}
