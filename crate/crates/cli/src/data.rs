//! On-disk slice sets: the ingest directory (manifest + one tensor file per
//! slice) and the stacked sample file written by `sample`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pdd_core::audio::NormStats;
use pdd_core::store::{read_tensors, write_tensors, DType};
use pdd_core::{Dataset, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.csv";
pub const NORM_STATS: &str = "norm_stats.json";
pub const SLICE_DIR: &str = "slices";
pub const SAMPLES: &str = "slices.pdt";
const SLICE_KEY: &str = "slice";
const SAMPLES_KEY: &str = "samples";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source: String,
    pub window: usize,
    /// Relative to the manifest's directory.
    pub tensor: String,
    pub norm_id: String,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, CliError> {
    let path = dir.join(MANIFEST);
    let mut rd = csv::Reader::from_path(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    rd.deserialize()
        .collect::<Result<Vec<ManifestRecord>, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_manifest(dir: &Path, records: &[ManifestRecord]) -> Result<(), CliError> {
    let path = dir.join(MANIFEST);
    let mut wr = csv::Writer::from_path(&path).map_err(CliError::runtime)?;
    if records.is_empty() {
        wr.write_record(["source", "window", "tensor", "norm_id"]).map_err(CliError::runtime)?;
    }
    for r in records {
        wr.serialize(r).map_err(CliError::runtime)?;
    }
    wr.flush()?;
    Ok(())
}

/// Hex SHA-256 of the slice values as stored (little-endian f32).
pub fn content_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for &v in t.data() {
        h.update((v as f32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `slice` under its content hash unless that file already exists.
/// Returns the path relative to `dir` and whether anything was written.
pub fn store_slice(dir: &Path, slice: &Tensor, meta: serde_json::Value) -> Result<(String, bool), CliError> {
    let rel = format!("{SLICE_DIR}/{}.pdt", &content_hash(slice)[..32]);
    let path = dir.join(&rel);
    if path.exists() {
        return Ok((rel, false));
    }
    let tensors = BTreeMap::from([(SLICE_KEY.to_string(), slice.clone())]);
    write_tensors(&path, &meta, &tensors, DType::F32)?;
    Ok((rel, true))
}

pub fn read_norm(dir: &Path) -> Result<NormStats, CliError> {
    let path = dir.join(NORM_STATS);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value).map_err(CliError::runtime)?)?;
    Ok(())
}

/// Load every slice listed in an ingest directory's manifest.
pub fn load_ingested(dir: &Path) -> Result<(Dataset, NormStats), CliError> {
    let records = read_manifest(dir)?;
    if records.is_empty() {
        return Err(CliError::Config(format!("{}: manifest lists no slices", dir.display())));
    }
    let norm = read_norm(dir)?;
    let mut items = Vec::with_capacity(records.len());
    for r in &records {
        if r.norm_id != norm.id() {
            return Err(CliError::Config(format!(
                "{}: slice {} was normalized with {}, the set uses {}",
                dir.display(),
                r.tensor,
                r.norm_id,
                norm.id()
            )));
        }
        let file = read_tensors(&dir.join(&r.tensor))?;
        let t = file
            .tensors
            .get(SLICE_KEY)
            .ok_or_else(|| CliError::Config(format!("{}: no `{SLICE_KEY}` tensor", r.tensor)))?;
        items.push(t.clone());
    }
    let data = Dataset::new(items).map_err(CliError::config)?;
    Ok((data, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub model_id: String,
    pub steps: usize,
    pub norm: NormStats,
}

pub fn write_samples(path: &Path, samples: &Tensor, meta: &SampleMeta) -> Result<(), CliError> {
    let meta = serde_json::to_value(meta).map_err(CliError::runtime)?;
    let tensors = BTreeMap::from([(SAMPLES_KEY.to_string(), samples.clone())]);
    write_tensors(path, &meta, &tensors, DType::F32)?;
    Ok(())
}

pub fn read_samples(dir: &Path) -> Result<(Vec<Tensor>, SampleMeta), CliError> {
    let path = dir.join(SAMPLES);
    let file = read_tensors(&path)?;
    let meta: SampleMeta =
        serde_json::from_value(file.metadata).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let stacked = file
        .tensors
        .get(SAMPLES_KEY)
        .ok_or_else(|| CliError::Config(format!("{}: no `{SAMPLES_KEY}` tensor", path.display())))?;
    Ok(((0..stacked.batch()).map(|b| stacked.item_tensor(b)).collect(), meta))
}

/// Slices for evaluation from either kind of directory.
pub fn load_any(dir: &Path) -> Result<Vec<Tensor>, CliError> {
    if dir.join(SAMPLES).exists() {
        Ok(read_samples(dir)?.0)
    } else {
        Ok(load_ingested(dir)?.0.items().to_vec())
    }
}

pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_including_empty() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &[]).unwrap();
        assert!(read_manifest(dir.path()).unwrap().is_empty());
        let recs = vec![ManifestRecord {
            source: "a, b.wav".into(),
            window: 2,
            tensor: "slices/x.pdt".into(),
            norm_id: "n".into(),
        }];
        write_manifest(dir.path(), &recs).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), recs);
    }

    #[test]
    fn hash_sees_stored_precision_only() {
        let a = Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5 + 1e-12, 1.0]).unwrap();
        let c = Tensor::from_vec(&[2], vec![0.25, 1.0]).unwrap();
        assert_eq!(content_hash(&a), content_hash(&b));
        assert_ne!(content_hash(&a), content_hash(&c));
    }
}
