//! Line-delimited dataset files.
//!
//! First line: header object with format version, the generating task spec,
//! and its hash. Every following line is one record object. Records
//! round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{DatasetRecord, TaskSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: TaskSpec,
    spec_hash: String,
}

/// FNV-1a over the canonical JSON encoding of the spec.
pub fn spec_hash(spec: &TaskSpec) -> String {
    let text = serde_json::to_string(spec).expect("spec serialization cannot fail");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn save_dataset(path: &Path, spec: &TaskSpec, records: &[DatasetRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        spec_hash: spec_hash(spec),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(TaskSpec, Vec<DatasetRecord>)> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Format(format!("opening {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    if header.spec_hash != spec_hash(&header.spec) {
        return Err(Error::Format("dataset header hash does not match its spec".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("record on line {}: {e}", i + 2)))?;
        records.push(r);
    }
    Ok((header.spec, records))
}
