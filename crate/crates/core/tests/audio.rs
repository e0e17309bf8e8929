use pdd_core::audio::{self, synth, MelConfig, MelTransform, NormStats, LONG_FRAMES};

#[test]
fn ten_minute_file_yields_floor_frames_over_window() {
    let sr = 22_050usize;
    let len = 600 * sr;
    let (wave, _) = synth::tone_sequence(len, sr / 2, sr as f64, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.wav");
    audio::write_wav(&path, &wave, sr as u32).unwrap();
    let t = MelTransform::new(MelConfig::default()).unwrap();
    let slices = audio::slice_audio(&path, &t, &NormStats::default()).unwrap();
    // frames without padding: 1 + (len - n_fft) / hop
    let frames = 1 + (len - 2048) / 512;
    assert_eq!(frames, 25_836);
    assert_eq!(slices.len(), frames / LONG_FRAMES);
    assert!(slices.iter().all(|s| s.data.data().iter().all(|v| (-1.0..=1.0).contains(v))));
}

#[test]
fn ingest_round_trips_through_the_wav_writer() {
    let sr = 22_050usize;
    let t = MelTransform::new(MelConfig::default()).unwrap();
    let n = t.samples_for_frames(LONG_FRAMES);
    let tone = synth::note(synth::pitch_hz(3), synth::Timbre::Square, n, sr as f64, 0.6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.wav");
    audio::write_wav(&path, &tone, sr as u32).unwrap();
    let res = audio::ingest_wavs(&[path], &t, -80.0);
    assert_eq!(res.slices.len(), 1);
    let norm = res.norm.unwrap();
    let direct = audio::pack(&t.long_mel(&tone, &norm).unwrap()).unwrap();
    // 16-bit quantization perturbs quiet cells only slightly
    let worst = direct
        .data
        .data()
        .iter()
        .zip(res.slices[0].slice.data.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");
}
