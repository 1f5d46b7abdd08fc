//! Line-delimited JSON: one object per line, UTF-8.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{KapError, Result};

/// Parsed lines with their 1-based line numbers; blank lines are skipped.
pub fn read_values(path: &Path) -> Result<Vec<(usize, serde_json::Value)>> {
    let text = fs::read_to_string(path).map_err(|e| KapError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| KapError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(path: &Path, line: usize, value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| KapError::Malformed { path: path.to_path_buf(), line, message: e.to_string() })
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_values(path)?.into_iter().map(|(line, v)| decode(path, line, v)).collect()
}

pub fn to_line<T: Serialize>(record: &T) -> String {
    // Serializing plain data structures cannot fail.
    serde_json::to_string(record).expect("record serializes")
}

/// Writes records atomically (temp file in the same directory, then rename).
pub fn write<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&to_line(&r));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| KapError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| KapError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| KapError::io(path, e))?;
    tmp.persist(path).map_err(|e| KapError::io(path, e.error))?;
    Ok(())
}
