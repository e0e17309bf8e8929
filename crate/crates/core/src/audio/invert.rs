use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{MelConfig, MelTransform};
use super::{LongMel, LONG_FRAMES, MEL_BINS};
use crate::error::{Error, Result};

/// Mel -> waveform by non-negative least squares on the filterbank followed
/// by Griffin-Lim phase recovery.
#[derive(Debug, Clone)]
pub struct GriffinLim {
    pub transform: MelTransform,
    pub iterations: usize,
    pub nnls_iterations: usize,
    /// Seed of the initial random phase.
    pub seed: u64,
    /// Extrapolation weight of the accelerated update; 0 gives the classic
    /// algorithm.
    pub momentum: f64,
}

impl GriffinLim {
    pub fn new(transform: MelTransform, iterations: usize, seed: u64) -> Result<Self> {
        if iterations < 1 {
            return Err(Error::invalid("Griffin-Lim needs at least one iteration"));
        }
        Ok(GriffinLim { transform, iterations, nnls_iterations: 100, seed, momentum: 0.99 })
    }

    pub fn invert(&self, m: &LongMel) -> Result<Vec<f64>> {
        m.data.ensure_shape(&[1, MEL_BINS, LONG_FRAMES])?;
        let norm = m.norm;
        norm.validate()?;
        // the bottom of the normalized range is treated as silence
        let mel_power: Vec<f64> = m
            .data
            .data()
            .iter()
            .map(|&v| if v <= -1.0 { 0.0 } else { 10f64.powf(norm.denormalize(v) / 10.0) })
            .collect();
        let power = self.nnls(&mel_power, LONG_FRAMES);
        let scale = self.transform.magnitude_scale();
        let mag: Vec<f64> = power.iter().map(|p| p.sqrt() / scale).collect();
        Ok(self.griffin_lim(&mag, LONG_FRAMES))
    }

    /// Non-negative `P` (`[bins, frames]`) with `filters * P ~= mel`.
    ///
    /// Residuals are weighted by `1 / mel^2` so quiet bands are fitted as
    /// closely as loud ones (errors are judged in dB downstream), and bins
    /// under any zero-energy band are pinned to zero, which is exact under
    /// non-negativity. Solved by weighted Lee-Seung multiplicative updates.
    fn nnls(&self, mel: &[f64], frames: usize) -> Vec<f64> {
        let filters = &self.transform.filters;
        let n_bins = self.transform.config().n_fft / 2 + 1;
        // y += F^T x   (x: [bands, frames], y: [bins, frames])
        let adjoint = |x: &[f64], y: &mut [f64]| {
            y.iter_mut().for_each(|v| *v = 0.0);
            for (m, f) in filters.iter().enumerate() {
                for (j, &w) in f.weights.iter().enumerate() {
                    let k = f.start + j;
                    for fr in 0..frames {
                        y[k * frames + fr] += w * x[m * frames + fr];
                    }
                }
            }
        };
        let forward = |p: &[f64], y: &mut [f64]| {
            y.iter_mut().for_each(|v| *v = 0.0);
            for (m, f) in filters.iter().enumerate() {
                for (j, &w) in f.weights.iter().enumerate() {
                    let k = f.start + j;
                    for fr in 0..frames {
                        y[m * frames + fr] += w * p[k * frames + fr];
                    }
                }
            }
        };
        let weight: Vec<f64> = mel.iter().map(|&v| if v > 0.0 { 1.0 / (v * v) } else { 0.0 }).collect();
        let weighted_mel: Vec<f64> = mel.iter().zip(&weight).map(|(v, w)| v * w).collect();
        let mut p = vec![0.0; n_bins * frames];
        adjoint(mel, &mut p);
        for (m, f) in filters.iter().enumerate() {
            for fr in 0..frames {
                if mel[m * frames + fr] <= 0.0 {
                    for j in 0..f.weights.len() {
                        p[(f.start + j) * frames + fr] = 0.0;
                    }
                }
            }
        }
        let mut num = vec![0.0; n_bins * frames];
        adjoint(&weighted_mel, &mut num);
        let mut approx = vec![0.0; filters.len() * frames];
        let mut denom = vec![0.0; n_bins * frames];
        for _ in 0..self.nnls_iterations {
            forward(&p, &mut approx);
            approx.iter_mut().zip(&weight).for_each(|(a, w)| *a *= w);
            adjoint(&approx, &mut denom);
            for ((pv, &nu), &de) in p.iter_mut().zip(&num).zip(&denom) {
                if de > 0.0 {
                    *pv *= nu / de;
                }
            }
        }
        p
    }

    fn griffin_lim(&self, mag: &[f64], frames: usize) -> Vec<f64> {
        let t = &self.transform;
        let n = t.config().n_fft;
        let hop = t.config().hop;
        let n_bins = n / 2 + 1;
        let len = t.samples_for_frames(frames);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut phase: Vec<Complex<f64>> = (0..n_bins * frames)
            .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let mut wsum = vec![0.0; len];
        for fr in 0..frames {
            for (i, w) in t.window.iter().enumerate() {
                wsum[fr * hop + i] += w * w;
            }
        }
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut wave = vec![0.0; len];
        let mut prev = vec![Complex::new(0.0, 0.0); n_bins * frames];
        for it in 0..self.iterations {
            wave.iter_mut().for_each(|v| *v = 0.0);
            for fr in 0..frames {
                for k in 0..n_bins {
                    buf[k] = phase[k * frames + fr] * mag[k * frames + fr];
                }
                for k in 1..n - n_bins + 1 {
                    buf[n - k] = buf[k].conj();
                }
                t.ifft.process(&mut buf);
                for (i, w) in t.window.iter().enumerate() {
                    wave[fr * hop + i] += w * buf[i].re / n as f64;
                }
            }
            for (v, &ws) in wave.iter_mut().zip(&wsum) {
                *v = if ws > 1e-8 { *v / ws } else { 0.0 };
            }
            if it + 1 == self.iterations {
                break;
            }
            for fr in 0..frames {
                t.spectrum(&wave, fr * hop, &mut buf);
                for k in 0..n_bins {
                    let idx = k * frames + fr;
                    let c = buf[k];
                    let accel = c + (c - prev[idx]) * self.momentum;
                    prev[idx] = c;
                    let r = accel.norm();
                    phase[idx] = if r > 0.0 { accel / r } else { Complex::new(1.0, 0.0) };
                }
            }
        }
        wave
    }
}

/// Invert a long spectrogram with the default transform and phase seed 0.
pub fn invert_mel(m: &LongMel, iterations: usize) -> Result<Vec<f64>> {
    GriffinLim::new(MelTransform::new(MelConfig::default())?, iterations, 0)?.invert(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{NormStats, synth};
    use crate::tensor::Tensor;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn silence_in_silence_out() {
        let m = LongMel::new(Tensor::full(&[1, MEL_BINS, LONG_FRAMES], -1.0), NormStats::default()).unwrap();
        let w = invert_mel(&m, 4).unwrap();
        let rms = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!(rms < 1e-4);
        assert_eq!(w.len(), 198_144);
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = LongMel::new(Tensor::full(&[1, MEL_BINS, LONG_FRAMES], -1.0), NormStats::default()).unwrap();
        assert!(invert_mel(&m, 0).is_err());
    }

    #[test]
    fn deterministic_and_round_trips_tones() {
        let t = MelTransform::new(MelConfig::default()).unwrap();
        let norm = NormStats::default();
        for (pitch, timbre) in [(0, synth::Timbre::Sine), (5, synth::Timbre::Saw), (9, synth::Timbre::Square)] {
            let wave = synth::note(synth::pitch_hz(pitch), timbre, 198_144, 22_050.0, 0.5);
            let m = t.long_mel(&wave, &norm).unwrap();
            let a = invert_mel(&m, 64).unwrap();
            assert_eq!(a, invert_mel(&m, 64).unwrap());
            let back = t.long_mel(&a, &norm).unwrap();
            let r = pearson(m.data.data(), back.data.data());
            assert!(r >= 0.9, "pitch {pitch} {timbre:?}: r = {r}");
        }
    }
}
