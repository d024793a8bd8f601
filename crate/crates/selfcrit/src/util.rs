//! Small shared helpers: digests, atomic file writes, JSONL IO.

use std::fs;
use std::io;
use std::path::Path;
use std::process;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Lowercases and collapses whitespace runs to single spaces — the
/// normalization used for answer comparison and leak auditing.
pub fn normalize_ws(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename, so concurrent writers of the same content never leave a
/// partially written file behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}.{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed),
    ));
    fs::write(&tmp, bytes)?;
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Serializes each item as one JSON line, writes the file atomically, and
/// returns the SHA-256 of the written bytes. An empty slice produces an
/// empty file; a non-empty file always ends with a newline.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<String> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item).map_err(io::Error::other)?);
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())?;
    Ok(sha256_hex(buf.as_bytes()))
}

/// One malformed line from a JSONL file.
#[derive(Debug, Clone)]
pub struct JsonlReject {
    pub line: usize,
    pub reason: String,
}

/// Reads a JSONL file, deserializing each non-empty line into `T`.
/// Malformed lines are collected rather than aborting the read.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<(Vec<T>, Vec<JsonlReject>)> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    let mut rejects = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(item) => items.push(item),
            Err(e) => rejects.push(JsonlReject {
                line: idx + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok((items, rejects))
}
