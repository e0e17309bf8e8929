//! `pdd`: ingest audio, train and distill diffusion models on packed
//! mel-spectrogram slices, sample, and evaluate.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdd_core::param::{ParamKind, WeightScheme};

use crate::config::{RunConfig, Sampler};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} of {total} files could not be ingested")]
    PartialIngest { failed: usize, total: usize },
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::PartialIngest { .. } => 3,
        }
    }
}

impl From<pdd_core::Error> for CliError {
    fn from(e: pdd_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "pdd", version, about)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Slice a directory of WAV files into normalized packed tensors.
    Ingest(IngestArgs),
    /// Train a denoiser on an ingested slice set.
    Train(TrainArgs),
    /// Progressively distill a checkpoint to fewer sampling steps.
    Distill(DistillArgs),
    /// Generate slices, spectrograms and audio from a checkpoint.
    Sample(SampleArgs),
    /// Score sample sets against a reference set.
    Eval(EvalArgs),
    /// Check the packing layout round trip on a tensor file.
    Pack {
        input: PathBuf,
    },
    /// Write a synthetic note-sequence WAV.
    Synth {
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0.5)]
        note_seconds: f64,
    },
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    audio_dir: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    log_floor_db: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weighting: Option<WeightScheme>,
    #[arg(long)]
    kind: Option<ParamKind>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    steps_per_round: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    #[arg(long)]
    griffin_lim_iterations: Option<usize>,
    /// Skip waveform inversion.
    #[arg(long)]
    no_wav: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Sample directory to score; repeatable, replaces `eval.generated`.
    #[arg(long)]
    generated: Vec<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Fold command-line overrides into the loaded configuration.
fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    set(&mut cfg.seed, cli.seed);
    set_some(&mut cfg.out, cli.out.clone());
    match &cli.command {
        Command::Ingest(a) => {
            set_some(&mut cfg.ingest.audio_dir, a.audio_dir.clone());
            set(&mut cfg.ingest.log_floor_db, a.log_floor_db);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            set_some(&mut t.data, a.data.clone());
            set_some(&mut t.init, a.init.clone());
            set(&mut t.steps, a.steps);
            set(&mut t.lr, a.lr);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.weighting, a.weighting);
            set(&mut cfg.model.kind, a.kind);
        }
        Command::Distill(a) => {
            let d = &mut cfg.distill;
            set_some(&mut d.data, a.data.clone());
            set_some(&mut d.checkpoint, a.checkpoint.clone());
            set(&mut d.n0, a.n0);
            set(&mut d.rounds, a.rounds);
            set(&mut d.steps_per_round, a.steps_per_round);
            set(&mut d.lr, a.lr);
            set(&mut d.batch_size, a.batch_size);
        }
        Command::Sample(a) => {
            let s = &mut cfg.sample;
            set_some(&mut s.checkpoint, a.checkpoint.clone());
            set_some(&mut s.steps, a.steps);
            set(&mut s.count, a.count);
            set(&mut s.batch_size, a.batch_size);
            set(&mut s.sampler, a.sampler);
            set(&mut s.griffin_lim_iterations, a.griffin_lim_iterations);
            if a.no_wav {
                s.write_wav = false;
            }
        }
        Command::Eval(a) => {
            if !a.generated.is_empty() {
                cfg.eval.generated = a.generated.clone();
            }
            set_some(&mut cfg.eval.reference, a.reference.clone());
            set_some(&mut cfg.eval.extractor, a.extractor.clone());
        }
        Command::Pack { .. } | Command::Synth { .. } => {}
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut cfg, cli);
    match &cli.command {
        Command::Ingest(_) => commands::ingest(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::Distill(_) => commands::distill_cmd(&cfg),
        Command::Sample(_) => commands::sample_cmd(&cfg),
        Command::Eval(_) => commands::eval_cmd(&cfg),
        Command::Pack { input } => commands::pack_cmd(&cfg, input),
        Command::Synth { seconds, note_seconds } => commands::synth_cmd(&cfg, *seconds, *note_seconds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
