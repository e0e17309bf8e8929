//! Shared fixtures for the benchmarks.

use pdd_core::audio::{synth, MelConfig, MelTransform};
use pdd_core::denoiser::{DenoiserModel, UNetConfig};
use pdd_core::param::ParamKind;
use pdd_core::schedule::ScheduleSpec;
use pdd_core::seed::stream;
use pdd_core::Tensor;

pub fn tiny_model() -> DenoiserModel {
    DenoiserModel::new(UNetConfig::tiny(), ParamKind::V, ScheduleSpec::default(), &mut stream(0, "bench-init"))
        .expect("tiny config is valid")
}

pub fn noise(shape: &[usize]) -> Tensor {
    Tensor::randn(shape, &mut stream(0, "bench-noise"))
}

pub fn transform() -> MelTransform {
    MelTransform::new(MelConfig::default()).expect("default mel config is valid")
}

/// `seconds` of synthetic notes at the default sample rate.
pub fn tones(seconds: f64) -> Vec<f64> {
    let sr = MelConfig::default().sample_rate as usize;
    synth::tone_sequence((seconds * sr as f64) as usize, sr / 2, sr as f64, 0).0
}
