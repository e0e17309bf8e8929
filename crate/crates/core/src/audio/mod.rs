//! Waveform <-> normalized mel-spectrogram plumbing and the snake packing
//! that folds a 384-frame spectrogram into three 128-frame channels.

mod ingest;
mod invert;
mod mel;
pub mod synth;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ingest::{ingest_wavs, Ingested, IngestedSlice};
pub use invert::{invert_mel, GriffinLim};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelTransform};
pub use wav::{read_wav, slice_audio, slice_audio_db, write_wav};

pub const MEL_BINS: usize = 128;
/// Frames in one long spectrogram.
pub const LONG_FRAMES: usize = 384;
/// Frames per packed channel.
pub const SLICE_FRAMES: usize = 128;
pub const PACKED_CHANNELS: usize = LONG_FRAMES / SLICE_FRAMES;
/// Identifier of the packing below; stored with checkpoints and datasets.
pub const SNAKE_LAYOUT: &str = "boustrophedon-v1";

/// Maps log amplitudes (dB) affinely onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub log_floor: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            log_floor: -80.0,
            scale_min: -80.0,
            scale_max: 0.0,
        }
    }
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min < self.scale_max) || !self.scale_min.is_finite() || !self.scale_max.is_finite() {
            return Err(Error::invalid(format!(
                "norm stats need scale_min < scale_max, got {} and {}",
                self.scale_min, self.scale_max
            )));
        }
        if !self.log_floor.is_finite() {
            return Err(Error::invalid("log floor must be finite"));
        }
        Ok(())
    }

    /// Stats spanning an observed dB range, never reaching below the floor.
    pub fn from_range(log_floor: f64, min_db: f64, max_db: f64) -> Result<Self> {
        let lo = min_db.max(log_floor);
        let hi = max_db.max(lo + 1.0);
        let s = NormStats { log_floor, scale_min: lo, scale_max: hi };
        s.validate()?;
        Ok(s)
    }

    pub fn normalize(&self, db: f64) -> f64 {
        let c = db.clamp(self.scale_min, self.scale_max);
        2.0 * (c - self.scale_min) / (self.scale_max - self.scale_min) - 1.0
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.scale_min + (v + 1.0) * 0.5 * (self.scale_max - self.scale_min)
    }

    /// Short content identifier used in manifests.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in [self.log_floor, self.scale_min, self.scale_max] {
            h.update(v.to_le_bytes());
        }
        h.finalize()[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Normalized mel spectrogram, `[1, MEL_BINS, LONG_FRAMES]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongMel {
    pub data: Tensor,
    pub norm: NormStats,
}

/// Packed spectrogram, `[PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSlice {
    pub data: Tensor,
    pub norm: NormStats,
}

impl LongMel {
    pub fn new(data: Tensor, norm: NormStats) -> Result<Self> {
        data.ensure_shape(&[1, MEL_BINS, LONG_FRAMES])?;
        Ok(LongMel { data, norm })
    }
}

impl MelSlice {
    pub fn new(data: Tensor, norm: NormStats) -> Result<Self> {
        data.ensure_shape(&[PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES])?;
        Ok(MelSlice { data, norm })
    }
}

/// Long frame index stored at packed `(channel, column)`: channels 0 and 2
/// run forward, channel 1 runs backwards so that neighbouring channels meet
/// at time-adjacent frames.
pub fn snake_frame(channel: usize, col: usize) -> usize {
    let base = channel * SLICE_FRAMES;
    if channel % 2 == 1 {
        base + SLICE_FRAMES - 1 - col
    } else {
        base + col
    }
}

pub fn pack(m: &LongMel) -> Result<MelSlice> {
    m.data.ensure_shape(&[1, MEL_BINS, LONG_FRAMES])?;
    let src = m.data.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..PACKED_CHANNELS {
        for bin in 0..MEL_BINS {
            let dst_row = (ch * MEL_BINS + bin) * SLICE_FRAMES;
            for col in 0..SLICE_FRAMES {
                out[dst_row + col] = src[bin * LONG_FRAMES + snake_frame(ch, col)];
            }
        }
    }
    MelSlice::new(Tensor::from_vec(&[PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES], out)?, m.norm)
}

pub fn unpack(s: &MelSlice) -> Result<LongMel> {
    s.data.ensure_shape(&[PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES])?;
    let src = s.data.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..PACKED_CHANNELS {
        for bin in 0..MEL_BINS {
            let src_row = (ch * MEL_BINS + bin) * SLICE_FRAMES;
            for col in 0..SLICE_FRAMES {
                out[bin * LONG_FRAMES + snake_frame(ch, col)] = src[src_row + col];
            }
        }
    }
    LongMel::new(Tensor::from_vec(&[1, MEL_BINS, LONG_FRAMES], out)?, s.norm)
}
