use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{LongMel, NormStats, LONG_FRAMES, MEL_BINS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 22_050,
            n_fft: 2048,
            hop: 512,
            mel_bins: MEL_BINS,
            f_min: 0.0,
            f_max: None,
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter touching FFT bins `start..start + weights.len()`.
#[derive(Debug, Clone)]
pub(super) struct MelFilter {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Precomputed window, FFT plans and filterbank for one [`MelConfig`].
#[derive(Clone)]
pub struct MelTransform {
    cfg: MelConfig,
    pub(super) window: Vec<f64>,
    pub(super) filters: Vec<MelFilter>,
    centers_hz: Vec<f64>,
    pub(super) fft: Arc<dyn Fft<f64>>,
    pub(super) ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelTransform").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl MelTransform {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let f_max = cfg.f_max.unwrap_or(nyquist);
        if cfg.n_fft < 2 || cfg.hop == 0 || cfg.mel_bins == 0 || cfg.sample_rate == 0 {
            return Err(Error::invalid("mel transform needs positive sizes"));
        }
        if !(0.0 <= cfg.f_min && cfg.f_min < f_max && f_max <= nyquist) {
            return Err(Error::invalid(format!("bad mel band edges {}..{f_max} Hz", cfg.f_min)));
        }
        let n = cfg.n_fft;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let n_bins = n / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / n as f64;
        let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.mel_bins);
        for m in 0..cfg.mel_bins {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f < hi {
                    if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                } else {
                    0.0
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            if start.is_none() {
                // narrower than one FFT bin: take the nearest bin
                let k = ((c / bin_hz).round() as usize).min(n_bins - 1);
                start = Some(k);
                weights.push(1.0);
            }
            filters.push(MelFilter { start: start.unwrap_or(0), weights });
        }
        let mut planner = FftPlanner::new();
        Ok(MelTransform {
            centers_hz: edges[1..=cfg.mel_bins].to_vec(),
            fft: planner.plan_fft_forward(n),
            ifft: planner.plan_fft_inverse(n),
            window,
            filters,
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Center frequency of every mel band.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Band whose center frequency lies closest to `f` on the mel scale.
    pub fn band_of_hz(&self, f: f64) -> usize {
        let m = hz_to_mel(f);
        (0..self.centers_hz.len())
            .min_by(|&a, &b| {
                let da = (hz_to_mel(self.centers_hz[a]) - m).abs();
                let db = (hz_to_mel(self.centers_hz[b]) - m).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }

    /// Frames produced from `samples` samples (no padding).
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.cfg.n_fft {
            0
        } else {
            (samples - self.cfg.n_fft) / self.cfg.hop + 1
        }
    }

    pub fn samples_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.cfg.n_fft + (frames - 1) * self.cfg.hop
        }
    }

    /// Magnitudes scale so a full-scale sinusoid on a bin centre reads 1.
    pub(super) fn magnitude_scale(&self) -> f64 {
        2.0 / self.window.iter().sum::<f64>()
    }

    /// Complex spectrum of the frame starting at `start`.
    pub(super) fn spectrum(&self, wave: &[f64], start: usize, buf: &mut [Complex<f64>]) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(wave[start + i] * self.window[i], 0.0);
        }
        self.fft.process(buf);
    }

    /// Mel power of every frame, `[mel_bins, frames]`, row-major.
    pub fn mel_power(&self, wave: &[f64]) -> (Vec<f64>, usize) {
        let frames = self.frame_count(wave.len());
        let bins = self.cfg.mel_bins;
        let scale = self.magnitude_scale();
        let mut out = vec![0.0; bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut power = vec![0.0; self.cfg.n_fft / 2 + 1];
        for fr in 0..frames {
            self.spectrum(wave, fr * self.cfg.hop, &mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr() * scale * scale;
            }
            for (m, f) in self.filters.iter().enumerate() {
                let e: f64 = f.weights.iter().zip(&power[f.start..]).map(|(w, p)| w * p).sum();
                out[m * frames + fr] = e;
            }
        }
        (out, frames)
    }

    /// Uncropped log-mel in dB, floored at `log_floor`: `[mel_bins, frames]`.
    pub fn mel_db(&self, wave: &[f64], log_floor: f64) -> Result<Tensor> {
        let (power, frames) = self.mel_power(wave);
        let floor = 10f64.powf(log_floor / 10.0);
        let db = power.into_iter().map(|p| 10.0 * p.max(floor).log10()).collect();
        Tensor::from_vec(&[self.cfg.mel_bins, frames], db)
    }

    /// Center-cropped, normalized long spectrogram.
    pub fn long_mel(&self, wave: &[f64], norm: &NormStats) -> Result<LongMel> {
        norm.validate()?;
        if self.cfg.mel_bins != MEL_BINS {
            return Err(Error::invalid(format!("long spectrograms need {MEL_BINS} mel bins")));
        }
        let need = self.samples_for_frames(LONG_FRAMES);
        if wave.len() < need {
            return Err(Error::invalid(format!(
                "need at least {need} samples for {LONG_FRAMES} frames, got {}",
                wave.len()
            )));
        }
        let frames = self.frame_count(wave.len());
        let start = (frames - LONG_FRAMES) / 2;
        let lo = start * self.cfg.hop;
        let hi = lo + need;
        let db = self.mel_db(&wave[lo..hi], norm.log_floor)?;
        let data = db.map(|v| norm.normalize(v)).reshape(&[1, MEL_BINS, LONG_FRAMES])?;
        LongMel::new(data, *norm)
    }
}

/// Long spectrogram with the default transform and normalization.
pub fn mel_spectrogram(wave: &[f64], sample_rate: u32) -> Result<LongMel> {
    let cfg = MelConfig::default();
    if sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "expected {} Hz audio, got {sample_rate} Hz",
            cfg.sample_rate
        )));
    }
    MelTransform::new(cfg)?.long_mel(wave, &NormStats::default())
}
