//! Content-addressed response cache.
//!
//! Layout: `<dir>/<hex key>` holds the raw response, `<dir>/index.jsonl`
//! records which page or question each key belongs to.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{KapError, Result};
use crate::jsonl;

pub const INDEX_FILE: &str = "index.jsonl";

/// Audit record appended to the index when a new key is written.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_no: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<u8>,
    pub fingerprint: String,
}

/// Where a cached value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Fetched,
}

#[derive(Debug)]
pub struct ReplayCache {
    dir: PathBuf,
    replay_only: bool,
    writer: Mutex<()>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.len() <= 128 && key.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl ReplayCache {
    /// In replay-only mode a miss is an error and nothing is ever written.
    pub fn open(dir: impl Into<PathBuf>, replay_only: bool) -> Result<Self> {
        let dir = dir.into();
        if !replay_only {
            fs::create_dir_all(&dir).map_err(|e| KapError::io(&dir, e))?;
        }
        Ok(Self { dir, replay_only, writer: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn replay_only(&self) -> bool {
        self.replay_only
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    fn check_key(&self, key: &str) -> Result<()> {
        if valid_key(key) {
            Ok(())
        } else {
            Err(KapError::Invariant(format!("cache key {key:?} is not lowercase hex")))
        }
    }

    pub fn get_bytes(&self, key: &str) -> Result<Option<Vec<u8>>> {
        self.check_key(key)?;
        let path = self.path(key);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(KapError::io(path, e)),
        }
    }

    /// Cached text, or `None`. Empty or non-UTF-8 entries are corrupt.
    pub fn get(&self, key: &str) -> Result<Option<String>> {
        let Some(bytes) = self.get_bytes(key)? else { return Ok(None) };
        let path = self.path(key);
        let text = String::from_utf8(bytes).map_err(|_| KapError::CacheCorrupt { path: path.clone(), reason: "not valid UTF-8".into() })?;
        if text.trim().is_empty() {
            return Err(KapError::CacheCorrupt { path, reason: "empty entry".into() });
        }
        Ok(Some(text))
    }

    pub fn put_bytes(&self, entry: &IndexEntry, bytes: &[u8]) -> Result<()> {
        self.check_key(&entry.key)?;
        if self.replay_only {
            return Err(KapError::Invariant("write to a replay-only cache".into()));
        }
        let _guard = self.writer.lock().unwrap();
        let path = self.path(&entry.key);
        let fresh = !path.exists();
        jsonl::write_atomic(&path, bytes)?;
        if fresh {
            let index = self.dir.join(INDEX_FILE);
            let mut f = OpenOptions::new().create(true).append(true).open(&index).map_err(|e| KapError::io(&index, e))?;
            writeln!(f, "{}", jsonl::to_line(entry)).map_err(|e| KapError::io(&index, e))?;
        }
        Ok(())
    }

    pub fn put(&self, entry: &IndexEntry, text: &str) -> Result<()> {
        self.put_bytes(entry, text.as_bytes())
    }

    /// Returns the cached text for `entry.key`, calling `fetch` on a miss
    /// and storing what it returns.
    pub fn get_or_fetch(&self, entry: &IndexEntry, fetch: impl FnOnce() -> Result<String>) -> Result<(String, Lookup)> {
        if let Some(text) = self.get(&entry.key)? {
            return Ok((text, Lookup::Hit));
        }
        if self.replay_only {
            return Err(KapError::CacheMiss(entry.key.clone()));
        }
        let text = fetch()?;
        self.put(entry, &text)?;
        Ok((text, Lookup::Fetched))
    }

    pub fn index(&self) -> Result<Vec<IndexEntry>> {
        let path = self.dir.join(INDEX_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        jsonl::read(&path)
    }

    /// Keys with an entry file, sorted.
    pub fn keys(&self) -> Result<Vec<String>> {
        let rd = match fs::read_dir(&self.dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(KapError::io(&self.dir, e)),
        };
        let mut keys = Vec::new();
        for entry in rd {
            let entry = entry.map_err(|e| KapError::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_key(&name) {
                keys.push(name);
            }
        }
        keys.sort();
        Ok(keys)
    }
}
