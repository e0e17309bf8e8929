//! Named-tensor container and the checkpoint / extractor files built on it.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "PDDT" | u32 container version | u32 n | n bytes JSON metadata | u32 count
//! count x { u16 n | n bytes UTF-8 name | u8 dtype (0 = f32, 1 = f64)
//!           | u8 rank | rank x u64 dim | raw little-endian elements }
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{NormStats, SNAKE_LAYOUT};
use crate::denoiser::{DenoiserModel, UNetConfig};
use crate::error::{Error, Result};
use crate::metrics::{Classifier, ClassifierConfig, StandInExtractor};
use crate::nn::ParamStore;
use crate::param::ParamKind;
use crate::schedule::ScheduleSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PDDT";
pub const CONTAINER_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode(metadata: &serde_json::Value, tensors: &BTreeMap<String, Tensor>, dtype: DType) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata).map_err(|e| Error::invalid(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::invalid("metadata too large"))?.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.code());
        out.push(u8::try_from(t.shape().len()).map_err(|_| Error::invalid("tensor rank above 255"))?);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(t.len() * dtype.width());
        match dtype {
            DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptFile { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let corrupt = |reason: String| Error::CorruptFile { path: path.to_path_buf(), reason };
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("not a tensor container".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)".into()));
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = u32::from_le_bytes(r.array()?);
    if version != CONTAINER_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: container version {version}, this build reads {CONTAINER_VERSION}",
            path.display()
        )));
    }
    let meta_len = u32::from_le_bytes(r.array()?) as usize;
    let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let count = u32::from_le_bytes(r.array()?);
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("non-UTF-8 tensor name".into()))?;
        let [code, rank] = r.array()?;
        let dtype = match code {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(corrupt(format!("tensor `{name}` has unknown element type {c}"))),
        };
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(r.array()?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| corrupt(format!("tensor `{name}` shape {shape:?} overflows")))?;
        let raw = r.take(n)?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(TensorFile { metadata, tensors })
}

pub fn write_tensors(
    path: &Path,
    metadata: &serde_json::Value,
    tensors: &BTreeMap<String, Tensor>,
    dtype: DType,
) -> Result<()> {
    std::fs::write(path, encode(metadata, tensors, dtype)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TensorFile> {
    decode(&std::fs::read(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    unet: UNetConfig,
    param_kind: ParamKind,
    schedule: ScheduleSpec,
    layout: String,
    trained_steps: u64,
    norm: Option<NormStats>,
    /// Sampling steps the model was distilled for, if any.
    sampling_steps: Option<usize>,
}

/// A model plus the data-pipeline facts needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub layout: String,
    pub norm: Option<NormStats>,
    pub sampling_steps: Option<usize>,
}

impl Checkpoint {
    pub fn new(model: DenoiserModel, norm: Option<NormStats>, sampling_steps: Option<usize>) -> Self {
        Checkpoint { model, layout: SNAKE_LAYOUT.to_string(), norm, sampling_steps }
    }

    /// Reject checkpoints produced for a different slice layout.
    pub fn ensure_layout(&self) -> Result<()> {
        if self.layout != SNAKE_LAYOUT {
            return Err(Error::IncompatibleCheckpoint(format!(
                "slice layout `{}`, this build packs `{SNAKE_LAYOUT}`",
                self.layout
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.model;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            unet: m.config.clone(),
            param_kind: m.kind,
            schedule: m.schedule,
            layout: self.layout.clone(),
            trained_steps: m.trained_steps,
            norm: self.norm,
            sampling_steps: self.sampling_steps,
        };
        let mut tensors = prefixed("param/", &m.params);
        tensors.extend(prefixed("buffer/", &m.buffers));
        let meta = serde_json::to_value(meta).map_err(|e| Error::invalid(e.to_string()))?;
        write_tensors(path, &meta, &tensors, DType::F64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensors(path)?;
        let version = file.metadata.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: checkpoint format {version:?}, this build reads {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(file.metadata)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
        let mut params = strip_prefix("param/", &file.tensors);
        let buffers = strip_prefix("buffer/", &file.tensors);
        // a freshly built model fixes the expected names and shapes
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = DenoiserModel::new(meta.unet.clone(), meta.param_kind, meta.schedule, &mut rng)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
        check_names(path, "parameter", &template.params, &params)?;
        check_names(path, "buffer", &template.buffers, &buffers)?;
        let model = DenoiserModel {
            params: std::mem::take(&mut params),
            buffers,
            trained_steps: meta.trained_steps,
            ..template
        };
        Ok(Checkpoint { model, layout: meta.layout, norm: meta.norm, sampling_steps: meta.sampling_steps })
    }
}

fn prefixed(prefix: &str, store: &ParamStore) -> BTreeMap<String, Tensor> {
    store.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect()
}

fn strip_prefix(prefix: &str, tensors: &BTreeMap<String, Tensor>) -> ParamStore {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

fn check_names(path: &Path, what: &str, want: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, t) in want {
        match got.get(name) {
            None => {
                return Err(Error::IncompatibleCheckpoint(format!("{}: missing {what} `{name}`", path.display())));
            }
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{}: {what} `{name}` has shape {:?}, expected {:?}",
                    path.display(),
                    g.shape(),
                    t.shape()
                )));
            }
            _ => {}
        }
    }
    if let Some(extra) = got.keys().find(|k| !want.contains_key(*k)) {
        return Err(Error::IncompatibleCheckpoint(format!("{}: unexpected {what} `{extra}`", path.display())));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractorMeta {
    extractor_version: u32,
    pitch: ClassifierConfig,
    instrument: ClassifierConfig,
}

pub fn save_extractor(ex: &StandInExtractor, path: &Path) -> Result<()> {
    let meta = ExtractorMeta {
        extractor_version: CHECKPOINT_VERSION,
        pitch: ex.pitch.config.clone(),
        instrument: ex.instrument.config.clone(),
    };
    let mut tensors = prefixed("pitch/", &ex.pitch.params);
    tensors.extend(prefixed("instrument/", &ex.instrument.params));
    let meta = serde_json::to_value(meta).map_err(|e| Error::invalid(e.to_string()))?;
    write_tensors(path, &meta, &tensors, DType::F64)
}

pub fn load_extractor(path: &Path) -> Result<StandInExtractor> {
    let file = read_tensors(path)?;
    let meta: ExtractorMeta = serde_json::from_value(file.metadata)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: not an extractor file: {e}", path.display())))?;
    if meta.extractor_version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: extractor format {}, this build reads {CHECKPOINT_VERSION}",
            path.display(),
            meta.extractor_version
        )));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut build = |prefix: &str, config: ClassifierConfig| -> Result<Classifier> {
        let template = Classifier::new(config.clone(), &mut rng)?;
        let params = strip_prefix(prefix, &file.tensors);
        check_names(path, "parameter", &template.params, &params)?;
        Ok(Classifier { config, params })
    };
    Ok(StandInExtractor { pitch: build("pitch/", meta.pitch)?, instrument: build("instrument/", meta.instrument)? })
}
