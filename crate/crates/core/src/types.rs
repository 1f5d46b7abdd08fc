//! Documents, pages and queries.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Faq,
    Insurance,
    Finance,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Faq, Category::Insurance, Category::Finance];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Faq => "faq",
            Category::Insurance => "insurance",
            Category::Finance => "finance",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faq" => Ok(Category::Faq),
            "insurance" => Ok(Category::Insurance),
            "finance" => Ok(Category::Finance),
            other => Err(Error::UnknownCategory(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub page_no: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text: Option<String>,
    /// Page image path, relative to the corpus root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Page {
    pub fn text(&self) -> &str {
        self.ocr_text.as_deref().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub pid: String,
    pub category: Category,
    pub pages: Vec<Page>,
}

impl Document {
    /// Checks the per-document invariants: non-empty pid, at least one
    /// page, contiguous 1-based page numbers, and some content on every page.
    pub fn validate(&self) -> Result<()> {
        if self.pid.is_empty() {
            return Err(Error::EmptyPid);
        }
        if self.pages.is_empty() {
            return Err(Error::NoPages(self.pid.clone()));
        }
        for (i, page) in self.pages.iter().enumerate() {
            let expected = i as u32 + 1;
            if page.page_no != expected {
                return Err(Error::PageNumbering { pid: self.pid.clone(), expected, found: page.page_no });
            }
            if page.ocr_text.is_none() && page.image_ref.is_none() {
                return Err(Error::EmptyPage { pid: self.pid.clone(), page_no: page.page_no });
            }
        }
        Ok(())
    }
}

/// Lineage of an augmented query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub parent: String,
    pub strategy: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub qid: String,
    pub query: String,
    pub source: BTreeSet<String>,
    pub ground_truth: BTreeSet<String>,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.ground_truth.is_empty() {
            return Err(Error::EmptyQuerySets(self.qid.clone()));
        }
        if !self.ground_truth.is_subset(&self.source) {
            return Err(Error::GroundTruthNotCandidate(self.qid.clone()));
        }
        if let Some(origin) = &self.origin {
            if !(1..=9).contains(&origin.strategy) {
                return Err(Error::BadStrategy { qid: self.qid.clone(), strategy: origin.strategy });
            }
        }
        Ok(())
    }

    pub fn is_original(&self) -> bool {
        self.origin.is_none()
    }
}

/// Validates a question set: per-query invariants plus qid uniqueness.
pub fn validate_questions(queries: &[Query]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for q in queries {
        q.validate()?;
        if !seen.insert(q.qid.as_str()) {
            return Err(Error::DuplicateQid(q.qid.clone()));
        }
    }
    Ok(())
}
