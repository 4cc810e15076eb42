//! Checkpoint serialization: a JSON manifest plus a flat little-endian
//! f64 parameter blob.
//!
//! Given a base path `p`, [`save`] writes `p.json` and `p.bin`. Loading
//! validates every shape and offset against the manifest, so a truncated
//! or reordered blob is rejected rather than silently misread.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameter};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    params: Vec<ParamEntry>,
}

fn paths(base: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut json = base.as_os_str().to_owned();
    json.push(".json");
    let mut bin = base.as_os_str().to_owned();
    bin.push(".bin");
    (json.into(), bin.into())
}

pub fn save(model: &Model, base: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut blob: Vec<u8> = Vec::new();
    for p in model.params() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            offset: blob.len() as u64,
            len: p.tensor.numel() as u64,
        });
        for v in &p.tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        seed: model.config.seed,
        params: entries,
    };
    let (json_path, bin_path) = paths(base);
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(json_path, text)?;
    fs::write(bin_path, blob)?;
    Ok(())
}

pub fn load(base: &Path) -> Result<Model> {
    let (json_path, bin_path) = paths(base);
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Error::Format(format!("reading {}: {e}", json_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("parsing {}: {e}", json_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(&bin_path)?;

    let mut params = Vec::with_capacity(manifest.params.len());
    let mut expected_offset = 0u64;
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        if numel as u64 != e.len {
            return Err(Error::Format(format!(
                "parameter {}: shape {:?} disagrees with len {}",
                e.name, e.shape, e.len
            )));
        }
        if e.offset != expected_offset {
            return Err(Error::Format(format!(
                "parameter {}: offset {} (expected {})",
                e.name, e.offset, expected_offset
            )));
        }
        let start = e.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "parameter {}: blob too short ({} < {end})",
                e.name,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = Tensor::new(e.shape.clone(), data)?;
        tensor.check_finite(&format!("checkpoint parameter {}", e.name))?;
        params.push(Parameter { name: e.name.clone(), tensor });
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(Error::Format(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_offset as usize
        )));
    }
    Model::from_parts(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadAgg;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            vocab_size: 8,
            n_layers: 1,
            n_heads: 2,
            hidden_dim: 8,
            max_seq_len: 16,
            seed: 3,
            head_agg: HeadAgg::Mean,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m");
        let model = tiny();
        save(&model, &base).unwrap();
        let loaded = load(&base).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            assert_eq!(a.tensor.data, b.tensor.data);
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let base1 = dir.path().join("a");
        let base2 = dir.path().join("b");
        let model = tiny();
        save(&model, &base1).unwrap();
        let loaded = load(&base1).unwrap();
        save(&loaded, &base2).unwrap();
        for ext in ["json", "bin"] {
            let x = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let y = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(x, y, "{ext} files differ after a save/load/save cycle");
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m");
        save(&tiny(), &base).unwrap();
        let bin = dir.path().join("m.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load(&base).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m");
        save(&tiny(), &base).unwrap();
        let json = dir.path().join("m.json");
        let text = std::fs::read_to_string(&json).unwrap().replace("\"len\": 64", "\"len\": 63");
        std::fs::write(&json, text).unwrap();
        assert!(load(&base).is_err());
    }
}
