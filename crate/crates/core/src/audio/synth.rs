//! Band-limited synthetic tones: a labelled corpus for smoke tests and for
//! training the stand-in feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PITCH_CLASSES: usize = 12;
pub const BASE_HZ: f64 = 220.0;
const MAX_HARMONICS: usize = 16;
const FADE_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timbre {
    Sine,
    Square,
    Saw,
    Triangle,
}

impl Timbre {
    pub const ALL: [Timbre; 4] = [Timbre::Sine, Timbre::Square, Timbre::Saw, Timbre::Triangle];

    pub fn index(self) -> usize {
        Timbre::ALL.iter().position(|&t| t == self).unwrap_or(0)
    }

    /// Fourier amplitude of harmonic `h` (1-based), signed.
    fn harmonic(self, h: usize) -> f64 {
        let hf = h as f64;
        match self {
            Timbre::Sine => f64::from(h == 1),
            Timbre::Square => if h % 2 == 1 { 1.0 / hf } else { 0.0 },
            Timbre::Saw => 1.0 / hf,
            Timbre::Triangle => {
                if h % 2 == 1 {
                    let sign = if (h / 2) % 2 == 0 { 1.0 } else { -1.0 };
                    sign / (hf * hf)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Pitch class `i` on a whole-tone ladder above [`BASE_HZ`].
pub fn pitch_hz(i: usize) -> f64 {
    BASE_HZ * 2f64.powf(2.0 * i as f64 / 12.0)
}

/// A single note with short linear fades, peak-normalized to `amp`.
pub fn note(freq: f64, timbre: Timbre, len: usize, sr: f64, amp: f64) -> Vec<f64> {
    let harmonics: Vec<(f64, f64)> = (1..=MAX_HARMONICS)
        .filter(|&h| freq * h as f64 <= 0.45 * sr)
        .map(|h| (2.0 * std::f64::consts::PI * freq * h as f64 / sr, timbre.harmonic(h)))
        .filter(|&(_, a)| a != 0.0)
        .collect();
    let mut out: Vec<f64> = (0..len)
        .map(|i| harmonics.iter().map(|&(w, a)| a * (w * i as f64).sin()).sum())
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fade = ((FADE_SECONDS * sr) as usize).min(len / 2).max(1);
    for (i, v) in out.iter_mut().enumerate() {
        let edge = i.min(len - 1 - i);
        let g = if edge < fade { edge as f64 / fade as f64 } else { 1.0 };
        *v *= g * amp / peak.max(f64::MIN_POSITIVE);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteLabel {
    pub pitch: usize,
    pub timbre: Timbre,
}

/// Back-to-back notes of `note_len` samples with uniformly drawn pitch and
/// timbre, filling at least `total_len` samples.
pub fn tone_sequence(total_len: usize, note_len: usize, sr: f64, seed: u64) -> (Vec<f64>, Vec<NoteLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wave = Vec::with_capacity(total_len + note_len);
    let mut labels = Vec::new();
    while wave.len() < total_len {
        let label = NoteLabel {
            pitch: rng.random_range(0..PITCH_CLASSES),
            timbre: Timbre::ALL[rng.random_range(0..Timbre::ALL.len())],
        };
        let amp = rng.random_range(0.3..0.8);
        wave.extend(note(pitch_hz(label.pitch), label.timbre, note_len, sr, amp));
        labels.push(label);
    }
    wave.truncate(total_len);
    (wave, labels)
}
