//! Declarative run configuration: one TOML file with a section per command,
//! every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use pdd_core::audio::{MelConfig, MEL_BINS, PACKED_CHANNELS, SLICE_FRAMES};
use pdd_core::denoiser::{TrainConfig, UNetConfig};
use pdd_core::diffusion::AncestralVariance;
use pdd_core::distill::DistillConfig;
use pdd_core::metrics::ExtractorConfig;
use pdd_core::param::{ParamKind, WeightScheme};
use pdd_core::schedule::ScheduleSpec;
use pdd_core::seed::derive_seed;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub mel: MelConfig,
    pub ingest: IngestSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            mel: MelConfig::default(),
            ingest: IngestSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            distill: DistillSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    pub audio_dir: Option<PathBuf>,
    pub log_floor_db: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { audio_dir: None, log_floor_db: -80.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub unet: UNetConfig,
    pub kind: ParamKind,
    pub schedule: ScheduleSpec,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { unet: UNetConfig::default(), kind: ParamKind::V, schedule: ScheduleSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Directory written by `ingest`.
    pub data: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    pub init: Option<PathBuf>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weighting: WeightScheme,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            data: None,
            init: None,
            lr: d.lr,
            steps: d.steps,
            batch_size: d.batch_size,
            weighting: d.weighting,
            log_every: d.log_every,
        }
    }
}

impl TrainSection {
    pub fn core(&self, master: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            weighting: self.weighting,
            seed: derive_seed(master, "train"),
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub n0: usize,
    pub rounds: usize,
    pub steps_per_round: usize,
    pub weighting: WeightScheme,
    pub lr: f64,
    pub batch_size: usize,
    pub log_every: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            data: None,
            checkpoint: None,
            n0: d.n0,
            rounds: d.rounds,
            steps_per_round: d.steps_per_round,
            weighting: d.weighting,
            lr: d.lr,
            batch_size: d.batch_size,
            log_every: d.log_every,
        }
    }
}

impl DistillSection {
    /// The student parameterization always follows the teacher checkpoint.
    pub fn core(&self, master: u64, kind: ParamKind) -> DistillConfig {
        DistillConfig {
            n0: self.n0,
            rounds: self.rounds,
            steps_per_round: self.steps_per_round,
            weighting: self.weighting,
            kind,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: derive_seed(master, "distill"),
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Ddim,
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub checkpoint: Option<PathBuf>,
    /// DDIM steps; defaults to the count a distilled checkpoint was trained for.
    pub steps: Option<usize>,
    pub count: usize,
    pub batch_size: usize,
    pub sampler: Sampler,
    pub ancestral_variance: AncestralVariance,
    pub griffin_lim_iterations: usize,
    pub write_wav: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            checkpoint: None,
            steps: None,
            count: 16,
            batch_size: 16,
            sampler: Sampler::Ddim,
            ancestral_variance: AncestralVariance::Posterior,
            griffin_lim_iterations: 32,
            write_wav: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Output directories of `sample`.
    pub generated: Vec<PathBuf>,
    /// Directory written by `ingest`, or a `sample` output directory.
    pub reference: Option<PathBuf>,
    /// Pretrained extractor; a stand-in is trained and saved when absent.
    pub extractor: Option<PathBuf>,
    pub extractor_training: ExtractorConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            generated: Vec::new(),
            reference: None,
            extractor: None,
            extractor_training: ExtractorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
    }

    /// Checks shared by every command that touches models or slices.
    pub fn validate_pipeline(&self) -> Result<(), CliError> {
        let m = &self.mel;
        if m.mel_bins != MEL_BINS {
            return Err(CliError::Config(format!("mel.mel_bins must be {MEL_BINS}, got {}", m.mel_bins)));
        }
        pdd_core::audio::MelTransform::new(m.clone()).map_err(CliError::config)?;
        Ok(())
    }

    pub fn validate_model(&self) -> Result<(), CliError> {
        let u = &self.model.unet;
        u.validate().map_err(CliError::config)?;
        if [u.packed_channels, u.mel_bins, u.frames] != [PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES] {
            return Err(CliError::Config(format!(
                "model.unet must take [{PACKED_CHANNELS}, {MEL_BINS}, {SLICE_FRAMES}] slices, got [{}, {}, {}]",
                u.packed_channels, u.mel_bins, u.frames
            )));
        }
        self.model.schedule.build().map_err(CliError::config)?;
        Ok(())
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let path = value.as_deref().ok_or_else(|| CliError::Config(format!("`{key}` is required")))?;
    if !path.exists() {
        return Err(CliError::Config(format!("{key}: {} does not exist", path.display())));
    }
    Ok(path)
}
