use std::path::Path;

use super::mel::MelTransform;
use super::{LongMel, NormStats, LONG_FRAMES, MEL_BINS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn ingest_err(path: &Path, reason: impl ToString) -> Error {
    Error::Ingest { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Decode 16-bit PCM WAV, downmixing to mono in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| ingest_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(ingest_err(
            path,
            format!("expected 16-bit PCM, found {:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        ));
    }
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ingest_err(path, e))?;
    let mono = raw
        .chunks_exact(ch)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32_768.0).sum::<f64>() / ch as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Write mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::invalid(format!("writing {}: {other}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32_767.0).round() as i16).map_err(io)?;
    }
    w.finalize().map_err(io)
}

/// Log-mel (dB) of every non-overlapping `LONG_FRAMES` window of a file,
/// each `[MEL_BINS, LONG_FRAMES]`; a trailing partial window is dropped.
pub fn slice_audio_db(path: &Path, transform: &MelTransform, log_floor: f64) -> Result<Vec<Tensor>> {
    let (wave, sr) = read_wav(path)?;
    if sr != transform.config().sample_rate {
        return Err(ingest_err(
            path,
            format!("sample rate {sr} Hz, expected {} Hz", transform.config().sample_rate),
        ));
    }
    if transform.config().mel_bins != MEL_BINS {
        return Err(Error::invalid(format!("slicing needs {MEL_BINS} mel bins")));
    }
    let windows = transform.frame_count(wave.len()) / LONG_FRAMES;
    let hop = transform.config().hop;
    let span = transform.samples_for_frames(LONG_FRAMES);
    (0..windows)
        .map(|w| {
            let start = w * LONG_FRAMES * hop;
            transform.mel_db(&wave[start..start + span], log_floor)
        })
        .collect()
}

/// Normalized long spectrograms of every full window in a WAV file.
pub fn slice_audio(path: &Path, transform: &MelTransform, norm: &NormStats) -> Result<Vec<LongMel>> {
    norm.validate()?;
    slice_audio_db(path, transform, norm.log_floor)?
        .into_iter()
        .map(|db| LongMel::new(db.map(|v| norm.normalize(v)).reshape(&[1, MEL_BINS, LONG_FRAMES])?, *norm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth, MelConfig};

    fn transform() -> MelTransform {
        MelTransform::new(MelConfig::default()).unwrap()
    }

    #[test]
    fn window_counts() {
        let dir = tempfile::tempdir().unwrap();
        let t = transform();
        let span2 = t.samples_for_frames(2 * LONG_FRAMES);
        let tone = synth::note(330.0, synth::Timbre::Saw, span2, 22_050.0, 0.5);
        let p = dir.path().join("two.wav");
        write_wav(&p, &tone, 22_050).unwrap();
        assert_eq!(slice_audio(&p, &t, &NormStats::default()).unwrap().len(), 2);

        let p = dir.path().join("short.wav");
        write_wav(&p, &tone[..100_000], 22_050).unwrap();
        assert!(slice_audio(&p, &t, &NormStats::default()).unwrap().is_empty());
    }

    #[test]
    fn stereo_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 22_050, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(16_384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let (m, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 22_050);
        assert_eq!(m, vec![0.25; 10]);
    }

    #[test]
    fn undecodable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"definitely not audio").unwrap();
        match slice_audio(&p, &transform(), &NormStats::default()) {
            Err(Error::Ingest { path, .. }) => assert_eq!(path, p),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_wav(&p, &[0.0; 10], 16_000).unwrap();
        assert!(matches!(slice_audio(&p, &transform(), &NormStats::default()), Err(Error::Ingest { .. })));
    }
}
