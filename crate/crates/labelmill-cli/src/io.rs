//! Output-file plumbing. Payload files are jsonl (one compact record per
//! line) or pretty-printed JSON reports; both are deterministic for a fixed
//! input, which is what makes reruns byte-comparable.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use labelmill::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::IoPath {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record)
            .map_err(|e| Error::Payload(format!("encoding {}: {e}", path.display())))?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Payload(format!("encoding {}: {e}", path.display())))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::IoPath {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(bytes).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })
}
