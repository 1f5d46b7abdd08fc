//! Character classes shared by the token counter, the segmenter and the
//! hashed embedder.

use alloc::string::String;
use unicode_normalization::UnicodeNormalization;

/// Returns true for ideographs, kana, hangul and bopomofo, the scripts that
/// are tokenized one codepoint at a time.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3100..=0x312F    // bopomofo
        | 0x31A0..=0x31BF    // bopomofo extended
        | 0x31F0..=0x31FF    // katakana phonetic extensions
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2A6DF  // extension B
        | 0x2A700..=0x2EBEF  // extensions C-F
        | 0x2F800..=0x2FA1F  // compatibility supplement
        | 0x30000..=0x3134F) // extension G
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharClass {
    Cjk,
    /// Letters and digits outside the CJK ranges; runs of these form words.
    Word,
    Space,
    Punct,
}

pub fn classify(c: char) -> CharClass {
    if is_cjk(c) {
        CharClass::Cjk
    } else if c.is_alphanumeric() {
        CharClass::Word
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Punct
    }
}

/// Canonical composition (NFC).
pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

pub fn is_nfc(s: &str) -> bool {
    unicode_normalization::is_nfc(s)
}
