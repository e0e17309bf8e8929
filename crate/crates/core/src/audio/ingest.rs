use std::path::{Path, PathBuf};

use super::mel::MelTransform;
use super::wav::slice_audio_db;
use super::{pack, LongMel, MelSlice, NormStats, LONG_FRAMES, MEL_BINS};
use crate::error::{Error, Result};

/// One packed window of a source file.
#[derive(Debug, Clone)]
pub struct IngestedSlice {
    /// Index into the ingested path list.
    pub source: usize,
    pub window: usize,
    pub slice: MelSlice,
}

#[derive(Debug)]
pub struct Ingested {
    /// `None` when no file produced a window.
    pub norm: Option<NormStats>,
    pub slices: Vec<IngestedSlice>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Two passes over `paths`: the first fixes the dataset-wide dB range, the
/// second normalizes and packs every full window. Files that fail to decode
/// are collected rather than aborting the run.
pub fn ingest_wavs(paths: &[PathBuf], transform: &MelTransform, log_floor: f64) -> Ingested {
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, p) in paths.iter().enumerate() {
        match slice_audio_db(p, transform, log_floor) {
            Ok(windows) => {
                for v in windows.iter().flat_map(|w| w.data()) {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                if windows.is_empty() {
                    log::warn!("{}: shorter than one window, skipped", p.display());
                }
                ok.push(i);
            }
            Err(e) => failures.push((p.clone(), e)),
        }
    }
    let mut out = Ingested { norm: None, slices: Vec::new(), failures };
    if !lo.is_finite() {
        return out;
    }
    let norm = match NormStats::from_range(log_floor, lo, hi) {
        Ok(n) => n,
        Err(e) => {
            out.failures.push((PathBuf::new(), e));
            return out;
        }
    };
    out.norm = Some(norm);
    for i in ok {
        match pack_file(&paths[i], transform, &norm) {
            Ok(slices) => out.slices.extend(
                slices.into_iter().enumerate().map(|(window, slice)| IngestedSlice { source: i, window, slice }),
            ),
            Err(e) => out.failures.push((paths[i].clone(), e)),
        }
    }
    out
}

fn pack_file(path: &Path, transform: &MelTransform, norm: &NormStats) -> Result<Vec<MelSlice>> {
    slice_audio_db(path, transform, norm.log_floor)?
        .into_iter()
        .map(|db| pack(&LongMel::new(db.map(|v| norm.normalize(v)).reshape(&[1, MEL_BINS, LONG_FRAMES])?, *norm)?))
        .collect()
}
