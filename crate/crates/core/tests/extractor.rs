use pdd_core::audio::{MelConfig, MelTransform, NormStats};
use pdd_core::metrics::{evaluate, tone_slices, ExtractorConfig, Head, StandInExtractor};
use pdd_core::store::{load_extractor, save_extractor};

#[test]
fn stand_in_extractor_gate() {
    let transform = MelTransform::new(MelConfig::default()).unwrap();
    let norm = NormStats::default();
    let train_set = tone_slices(3, 1, &transform, &norm).unwrap();
    let held_out = tone_slices(1, 2, &transform, &norm).unwrap();
    let ex = StandInExtractor::train(&train_set, &ExtractorConfig::default()).unwrap();

    let pitch = ex.accuracy(&held_out, Head::Pitch).unwrap();
    let inst = ex.accuracy(&held_out, Head::Instrument).unwrap();
    assert!(pitch >= 0.95, "pitch accuracy {pitch}");
    assert!(inst >= 0.9, "instrument accuracy {inst}");

    let slices = &held_out.slices[..20];
    let f = ex.features(slices).unwrap();
    let twice = ex.features(&[slices[3].clone(), slices[3].clone()]).unwrap();
    assert_eq!(twice.pitch_emb.row(0), twice.pitch_emb.row(1));
    assert_eq!(twice.inst_prob.row(0), f.inst_prob.row(3));

    let reversed: Vec<_> = slices.iter().rev().cloned().collect();
    let fr = ex.features(&reversed).unwrap();
    for i in 0..slices.len() {
        assert_eq!(f.pitch_emb.row(i), fr.pitch_emb.row(slices.len() - 1 - i));
        assert_eq!(f.inst_emb.row(i), fr.inst_emb.row(slices.len() - 1 - i));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extractor.pdt");
    save_extractor(&ex, &path).unwrap();
    assert_eq!(load_extractor(&path).unwrap(), ex);

    let same = evaluate(&ex, &held_out.slices, &held_out.slices).unwrap();
    assert!(same.fad.abs() < 1e-6, "FAD {}", same.fad);
    // unbiased MMD of a set with itself is -2 (1 - mean off-diagonal kernel) / n
    let n = held_out.slices.len() as f64;
    for kid in [same.pkid, same.ikid] {
        assert!((-2.0 / n..=0.0).contains(&kid), "KID {kid}");
    }
    assert!(same.pis > 1.0 && same.pis <= 12.0 + 1e-9);
}

#[test]
fn training_is_deterministic() {
    let transform = MelTransform::new(MelConfig::default()).unwrap();
    let set = tone_slices(1, 3, &transform, &NormStats::default()).unwrap();
    let cfg = ExtractorConfig { steps: 20, ..Default::default() };
    assert_eq!(StandInExtractor::train(&set, &cfg).unwrap(), StandInExtractor::train(&set, &cfg).unwrap());
}
