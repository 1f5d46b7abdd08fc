//! Post-OCR enhancement prompts and the ablation presets.
//!
//! The user message is assembled from fixed sections in a fixed order:
//! preamble, error correction, layout reconstruction (vision only),
//! retrieval-aware rewriting (rewrite only), the OCR text block (OCR text
//! only) and the output-format contract. Each section opens with a marker
//! line so that prompt structure can be checked mechanically.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::FramedHasher;

pub const PROMPT_VERSION: &str = "kap-post-ocr/1";
pub const DEFAULT_MODEL: &str = "claude-3-7-sonnet-20250219";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub use_vision: bool,
    pub use_ocr_text: bool,
    pub use_rewrite: bool,
    pub model_id: String,
    pub max_retries: u32,
    pub prompt_version: String,
}

impl EnhanceConfig {
    pub fn new(use_vision: bool, use_ocr_text: bool, use_rewrite: bool) -> Self {
        Self {
            use_vision,
            use_ocr_text,
            use_rewrite,
            model_id: DEFAULT_MODEL.to_string(),
            max_retries: 3,
            prompt_version: PROMPT_VERSION.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_vision || self.use_ocr_text) {
            return Err(Error::NoModality);
        }
        Ok(())
    }

    /// Short hash of everything that changes the provider's output.
    /// `max_retries` is transport policy and is left out.
    pub fn fingerprint(&self) -> String {
        let flag = |b: bool| if b { b"1" } else { b"0" };
        let mut hex = FramedHasher::new()
            .field(flag(self.use_vision))
            .field(flag(self.use_ocr_text))
            .field(flag(self.use_rewrite))
            .field(self.model_id.as_bytes())
            .field(self.prompt_version.as_bytes())
            .finish_hex();
        hex.truncate(16);
        hex
    }
}

/// The baseline and the four enhancement arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    Full,
    NoVision,
    NoOcrText,
    NoRewrite,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Baseline, Preset::Full, Preset::NoVision, Preset::NoOcrText, Preset::NoRewrite];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Full => "full",
            Preset::NoVision => "no_vision",
            Preset::NoOcrText => "no_ocr_text",
            Preset::NoRewrite => "no_rewrite",
        }
    }

    /// Row label in rendered result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Preset::Baseline => "Baseline",
            Preset::Full => "KAP (Ours)",
            Preset::NoVision => "KAP w/o Vision",
            Preset::NoOcrText => "KAP w/o OCR Text",
            Preset::NoRewrite => "KAP w/o Rewrite",
        }
    }

    /// `(vision, ocr_text, rewrite)`; `None` for the baseline, which skips
    /// enhancement.
    pub fn flags(self) -> Option<(bool, bool, bool)> {
        match self {
            Preset::Baseline => None,
            Preset::Full => Some((true, true, true)),
            Preset::NoVision => Some((false, true, true)),
            Preset::NoOcrText => Some((true, false, true)),
            Preset::NoRewrite => Some((true, true, false)),
        }
    }

    pub fn config(self) -> Option<EnhanceConfig> {
        self.flags().map(|(v, o, r)| EnhanceConfig::new(v, o, r))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| alloc::format!("unknown preset {s:?} (expected baseline, full, no_vision, no_ocr_text or no_rewrite)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRequest {
    pub system_text: String,
    pub user_text: String,
    pub image: Option<ImageInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PromptSection {
    Preamble,
    Correction,
    Layout,
    Rewrite,
    OcrBlock,
    OutputFormat,
}

impl PromptSection {
    pub const ALL: [PromptSection; 6] = [
        PromptSection::Preamble,
        PromptSection::Correction,
        PromptSection::Layout,
        PromptSection::Rewrite,
        PromptSection::OcrBlock,
        PromptSection::OutputFormat,
    ];

    pub fn marker(self) -> &'static str {
        match self {
            PromptSection::Preamble => "## TASK",
            PromptSection::Correction => "## ERROR CORRECTION",
            PromptSection::Layout => "## LAYOUT RECONSTRUCTION",
            PromptSection::Rewrite => "## RETRIEVAL-AWARE REWRITING",
            PromptSection::OcrBlock => "## OCR TEXT",
            PromptSection::OutputFormat => "## OUTPUT FORMAT",
        }
    }
}

const OCR_OPEN: &str = "<ocr_text>";
const OCR_CLOSE: &str = "</ocr_text>";

const SYSTEM_TEXT: &str = "You are a document preprocessing engine for a retrieval system over \
Traditional Chinese financial, insurance and legal documents. You repair and restructure page \
text so that keyword search and semantic search can both find it. You never invent facts, \
figures or entities that are not supported by the page.";

const CORRECTION: &str = "Fix character-level OCR errors. Typical confusions are the letter O \
read for the digit 0, the letter l or I read for the digit 1, dropped or duplicated characters, \
visually similar Traditional Chinese characters, broken numbers and misplaced punctuation. \
Restore correct Traditional Chinese wording and grammar while preserving the meaning, every \
number, date, amount, unit and proper name. Do not convert to Simplified Chinese.";

const LAYOUT: &str = "Use the attached page image to recover the structure the OCR pass lost: \
section headings, clause numbering, list items, column alignment and tables. Re-associate each \
table cell with its row and column headers so that no value is separated from what it measures. \
Keep the reading order of the original page.";

const REWRITE: &str = "Rewrite the corrected content so that it retrieves well:\n\
1. For keyword search: keep every important original term exactly as written, and add common \
synonyms and equivalent expressions for key terms next to them (for example 數據 with 資訊, \
決策 with 策略), so that queries phrased differently still share words with the page.\n\
2. For semantic search: restate every table row as a complete natural-language sentence that \
names the subject, the attribute and the value (for example, a row with date 2025/03/03, company \
XX and amount $10,000 becomes: 2025年3月3日，XX 公司記錄了一筆 $10,000 的交易。).";

const OUTPUT_FORMAT: &str = "Return only the enhanced page text in Traditional Chinese, as plain \
text. Do not add explanations, commentary, headings about your process, code fences or markup.";

fn preamble(config: &EnhanceConfig, has_image: bool) -> &'static str {
    match (has_image, config.use_ocr_text) {
        (true, true) => "You are given the image of one document page together with the text an OCR engine extracted from it. Produce an enhanced version of the page text.",
        (true, false) => "You are given the image of one document page. Read the page directly from the image and produce an enhanced version of its text.",
        (false, _) => "You are given the text an OCR engine extracted from one document page. The page image is not available. Produce an enhanced version of the page text.",
    }
}

/// Assembles the enhancement prompt. Pure: identical inputs give
/// byte-identical output. The image is attached only under `use_vision`,
/// and the OCR text only under `use_ocr_text`.
pub fn build_prompt(image: Option<ImageInput>, ocr_text: &str, config: &EnhanceConfig) -> PromptRequest {
    let image = image.filter(|_| config.use_vision);
    let mut sections: Vec<(PromptSection, String)> = Vec::new();
    sections.push((PromptSection::Preamble, preamble(config, image.is_some()).to_string()));
    sections.push((PromptSection::Correction, CORRECTION.to_string()));
    if image.is_some() {
        sections.push((PromptSection::Layout, LAYOUT.to_string()));
    }
    if config.use_rewrite {
        sections.push((PromptSection::Rewrite, REWRITE.to_string()));
    }
    if config.use_ocr_text {
        sections.push((PromptSection::OcrBlock, alloc::format!("{OCR_OPEN}\n{ocr_text}\n{OCR_CLOSE}")));
    }
    sections.push((PromptSection::OutputFormat, OUTPUT_FORMAT.to_string()));

    let mut user_text = String::new();
    for (i, (section, body)) in sections.iter().enumerate() {
        if i > 0 {
            user_text.push_str("\n\n");
        }
        user_text.push_str(section.marker());
        user_text.push('\n');
        user_text.push_str(body);
    }
    PromptRequest { system_text: SYSTEM_TEXT.to_string(), user_text, image }
}

/// Sections present in a built prompt, in order. Lines inside the OCR
/// block are not inspected.
pub fn sections(user_text: &str) -> Vec<PromptSection> {
    let mut found = Vec::new();
    let mut in_ocr = false;
    for line in user_text.lines() {
        if in_ocr {
            in_ocr = line != OCR_CLOSE;
            continue;
        }
        if line == OCR_OPEN {
            in_ocr = true;
        } else if let Some(s) = PromptSection::ALL.into_iter().find(|s| s.marker() == line) {
            found.push(s);
        }
    }
    found
}

/// Content address of one provider call.
pub fn cache_key(request: &PromptRequest, model_id: &str, prompt_version: &str) -> String {
    let mut h = FramedHasher::new().field(request.system_text.as_bytes()).field(request.user_text.as_bytes());
    h = match &request.image {
        Some(img) => h.field(b"image").field(img.media_type.as_bytes()).field(&img.bytes),
        None => h.field(b"no-image"),
    };
    h.field(model_id.as_bytes()).field(prompt_version.as_bytes()).finish_hex()
}
