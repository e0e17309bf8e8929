use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pdd_core::audio::{
    self, ingest_wavs, pack, unpack, synth, GriffinLim, LongMel, MelSlice, MelTransform, NormStats, LONG_FRAMES,
    MEL_BINS, PACKED_CHANNELS, SLICE_FRAMES,
};
use pdd_core::denoiser::{train, DenoiserModel, TrainLog};
use pdd_core::diffusion;
use pdd_core::distill::progressive_distill;
use pdd_core::metrics::{evaluate, tone_slices, Head, MetricsReport, StandInExtractor};
use pdd_core::seed::{derive_seed, stream};
use pdd_core::store::{load_extractor, read_tensors, save_extractor, write_tensors, Checkpoint, DType};
use pdd_core::Tensor;
use serde::Serialize;

use crate::config::{require, RunConfig, Sampler};
use crate::data::{self, ManifestRecord, SampleMeta};
use crate::CliError;

/// Create the output directory and record the effective configuration.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(format!("{command}.config.toml")), cfg.to_toml())?;
    Ok(out)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path).map_err(CliError::config)?;
    ck.ensure_layout().map_err(CliError::config)?;
    Ok(ck)
}

fn write_loss_csv(path: &Path, log: &TrainLog) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_path(path).map_err(CliError::runtime)?;
    if log.records.is_empty() {
        wr.write_record(["step", "loss", "lr"]).map_err(CliError::runtime)?;
    }
    for r in &log.records {
        wr.serialize(r).map_err(CliError::runtime)?;
    }
    wr.flush()?;
    Ok(())
}

fn model_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_pipeline()?;
    let audio_dir = require(&cfg.ingest.audio_dir, "ingest.audio_dir")?;
    let transform = MelTransform::new(cfg.mel.clone()).map_err(CliError::config)?;
    let out = prepare_out(cfg, "ingest")?;
    std::fs::create_dir_all(out.join(data::SLICE_DIR))?;

    let paths = data::list_wavs(audio_dir)?;
    if paths.is_empty() {
        log::warn!("no WAV files under {}; writing an empty manifest", audio_dir.display());
        return data::write_manifest(&out, &[]);
    }
    let res = ingest_wavs(&paths, &transform, cfg.ingest.log_floor_db);
    for (path, e) in &res.failures {
        log::error!("skipping {}: {e}", path.display());
    }
    let mut records = Vec::with_capacity(res.slices.len());
    let mut written = 0;
    if let Some(norm) = res.norm {
        data::write_json(&out.join(data::NORM_STATS), &norm)?;
        for s in &res.slices {
            let source = paths[s.source].strip_prefix(audio_dir).unwrap_or(&paths[s.source]);
            let source = source.to_string_lossy().into_owned();
            let meta = serde_json::json!({ "source": source, "window": s.window, "norm_id": norm.id() });
            let (tensor, fresh) = data::store_slice(&out, &s.slice.data, meta)?;
            written += usize::from(fresh);
            records.push(ManifestRecord { source, window: s.window, tensor, norm_id: norm.id() });
        }
    }
    data::write_manifest(&out, &records)?;
    log::info!(
        "{} slices from {} files ({written} new, {} failed)",
        records.len(),
        paths.len(),
        res.failures.len()
    );
    if res.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::PartialIngest { failed: res.failures.len(), total: paths.len() })
    }
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_model()?;
    let tc = cfg.train.core(cfg.seed);
    tc.validate().map_err(CliError::config)?;
    let data_dir = require(&cfg.train.data, "train.data")?;
    let init = match &cfg.train.init {
        Some(_) => Some(load_checkpoint(require(&cfg.train.init, "train.init")?)?),
        None => None,
    };
    let (data, norm) = data::load_ingested(data_dir)?;
    let model = match init {
        Some(ck) => ck.model,
        None => {
            let m = &cfg.model;
            DenoiserModel::new(m.unet.clone(), m.kind, m.schedule, &mut stream(cfg.seed, "init")).map_err(CliError::config)?
        }
    };
    if data.item_shape() != Some(&model.config.item_shape()[..]) {
        return Err(CliError::Config("slice shape does not match the model input".into()));
    }
    let out = prepare_out(cfg, "train")?;
    let sched = model.schedule.build().map_err(CliError::config)?;
    log::info!("training {} parameters on {} slices for {} steps", model.param_count(), data.len(), tc.steps);
    match train(model, &data, &sched, &tc) {
        Ok((model, log)) => {
            Checkpoint::new(model, Some(norm), None).save(&out.join("checkpoint.pdt"))?;
            write_loss_csv(&out.join("loss.csv"), &log)
        }
        Err(f) => {
            Checkpoint::new(*f.last_good, Some(norm), None).save(&out.join("checkpoint.pdt"))?;
            write_loss_csv(&out.join("loss.csv"), &f.log)?;
            Err(CliError::Runtime(format!("training failed at step {}: {} (last good checkpoint kept)", f.step, f.error)))
        }
    }
}

pub fn distill_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let ck_path = require(&cfg.distill.checkpoint, "distill.checkpoint")?;
    let data_dir = require(&cfg.distill.data, "distill.data")?;
    let teacher = load_checkpoint(ck_path)?;
    let dc = cfg.distill.core(cfg.seed, teacher.model.kind);
    dc.validate().map_err(CliError::config)?;
    let (data, norm) = data::load_ingested(data_dir)?;
    let norm = teacher.norm.unwrap_or(norm);
    let out = prepare_out(cfg, "distill")?;
    match progressive_distill(&teacher.model, &data, &dc) {
        Ok(rounds) => {
            for r in rounds {
                write_loss_csv(&out.join(format!("loss_N{}.csv", r.n_steps)), &r.log)?;
                Checkpoint::new(r.model, Some(norm), Some(r.n_steps)).save(&out.join(format!("model_N{}.pdt", r.n_steps)))?;
            }
            Ok(())
        }
        Err(f) => {
            Checkpoint::new(*f.last_good, Some(norm), None).save(&out.join("model_last_good.pdt"))?;
            Err(CliError::Runtime(format!("distillation failed at step {}: {}", f.step, f.error)))
        }
    }
}

pub fn sample_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_pipeline()?;
    let s = &cfg.sample;
    let ck_path = require(&s.checkpoint, "sample.checkpoint")?;
    if s.count == 0 || s.batch_size == 0 || s.griffin_lim_iterations == 0 {
        return Err(CliError::Config("sample.count, batch_size and griffin_lim_iterations must be positive".into()));
    }
    let ck = load_checkpoint(ck_path)?;
    let steps = s.steps.or(ck.sampling_steps).unwrap_or(ck.model.schedule.steps);
    if steps == 0 {
        return Err(CliError::Config("sample.steps must be positive".into()));
    }
    let norm = ck.norm.unwrap_or_else(|| {
        log::warn!("checkpoint carries no normalization; using defaults");
        NormStats::default()
    });
    let transform = MelTransform::new(cfg.mel.clone()).map_err(CliError::config)?;
    let gl = GriffinLim::new(transform, s.griffin_lim_iterations, derive_seed(cfg.seed, "griffin-lim"))
        .map_err(CliError::config)?;
    let out = prepare_out(cfg, "sample")?;

    let mut rng = stream(cfg.seed, "sample");
    let sched = ck.model.schedule.build().map_err(CliError::config)?;
    let mut slices = Vec::with_capacity(s.count);
    while slices.len() < s.count {
        let b = s.batch_size.min(s.count - slices.len());
        let shape = [b, PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES];
        let x = match s.sampler {
            Sampler::Ddim => diffusion::sample(&ck.model, steps, &shape, &mut rng)?,
            Sampler::Ancestral => diffusion::sample_ancestral(&ck.model, &sched, &shape, s.ancestral_variance, &mut rng)?,
        };
        // generated values outside the normalized range carry no meaning
        let x = x.map(|v| v.clamp(-1.0, 1.0));
        slices.extend((0..b).map(|i| x.item_tensor(i)));
        log::info!("sampled {}/{}", slices.len(), s.count);
    }
    let refs: Vec<&Tensor> = slices.iter().collect();
    let steps_used = if s.sampler == Sampler::Ddim { steps } else { sched.steps() };
    let meta = SampleMeta { model_id: model_id(ck_path), steps: steps_used, norm };
    data::write_samples(&out.join(data::SAMPLES), &Tensor::stack(&refs)?, &meta)?;

    let mut longs = Vec::with_capacity(slices.len());
    for t in &slices {
        longs.push(unpack(&MelSlice::new(t.clone(), norm)?)?);
    }
    let long_refs: Vec<&Tensor> = longs.iter().map(|m| &m.data).collect();
    let long_meta = serde_json::to_value(&meta).map_err(CliError::runtime)?;
    let long_tensors = BTreeMap::from([("long_mels".to_string(), Tensor::stack(&long_refs)?)]);
    write_tensors(&out.join("long_mels.pdt"), &long_meta, &long_tensors, DType::F32)?;

    if s.write_wav {
        let wav_dir = out.join("wav");
        std::fs::create_dir_all(&wav_dir)?;
        for (i, m) in longs.iter().enumerate() {
            let wave = gl.invert(m)?;
            audio::write_wav(&wav_dir.join(format!("sample_{i:04}.wav")), &wave, cfg.mel.sample_rate)?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    model: String,
    steps: usize,
    pis: f64,
    iis: f64,
    pkid: f64,
    ikid: f64,
    fad: f64,
}

impl MetricsRow {
    fn new(model: String, steps: usize, r: MetricsReport) -> Self {
        MetricsRow { model, steps, pis: r.pis, iis: r.iis, pkid: r.pkid, ikid: r.ikid, fad: r.fad }
    }
}

fn render_table(rows: &[MetricsRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<width$}  {:>5}  {:>8}  {:>8}  {:>9}  {:>9}  {:>10}\n",
        "model", "N", "PIS", "IIS", "PKID", "IKID", "FAD"
    );
    for r in rows {
        s += &format!(
            "{:<width$}  {:>5}  {:>8.3}  {:>8.3}  {:>9.4}  {:>9.4}  {:>10.4}\n",
            r.model, r.steps, r.pis, r.iis, r.pkid, r.ikid, r.fad
        );
    }
    s
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_pipeline()?;
    let e = &cfg.eval;
    let ref_dir = require(&e.reference, "eval.reference")?;
    if e.generated.is_empty() {
        return Err(CliError::Config("eval.generated lists no sample directories".into()));
    }
    let mut generated = Vec::with_capacity(e.generated.len());
    for dir in &e.generated {
        if !dir.exists() {
            return Err(CliError::Config(format!("eval.generated: {} does not exist", dir.display())));
        }
        generated.push(data::read_samples(dir)?);
    }
    let reference = data::load_any(ref_dir)?;
    let extractor = match &e.extractor {
        Some(_) => Some(load_extractor(require(&e.extractor, "eval.extractor")?).map_err(CliError::config)?),
        None => None,
    };
    let out = prepare_out(cfg, "eval")?;
    let extractor = match extractor {
        Some(ex) => ex,
        None => {
            let norm = data::read_norm(ref_dir).unwrap_or(generated[0].1.norm);
            let transform = MelTransform::new(cfg.mel.clone()).map_err(CliError::config)?;
            let mut ec = e.extractor_training.clone();
            ec.seed = derive_seed(cfg.seed, "extractor");
            let tones = tone_slices(ec.examples_per_class, derive_seed(cfg.seed, "extractor-tones"), &transform, &norm)?;
            let ex = StandInExtractor::train(&tones, &ec)?;
            let held_out = tone_slices(1, derive_seed(cfg.seed, "extractor-held-out"), &transform, &norm)?;
            log::info!(
                "stand-in extractor held-out accuracy: pitch {:.3}, instrument {:.3}",
                ex.accuracy(&held_out, Head::Pitch)?,
                ex.accuracy(&held_out, Head::Instrument)?
            );
            save_extractor(&ex, &out.join("extractor.pdt"))?;
            ex
        }
    };
    let mut rows = Vec::with_capacity(generated.len());
    for (slices, meta) in &generated {
        let report = evaluate(&extractor, slices, &reference)?;
        rows.push(MetricsRow::new(meta.model_id.clone(), meta.steps, report));
    }
    let mut wr = csv::Writer::from_path(out.join("metrics.csv")).map_err(CliError::runtime)?;
    for r in &rows {
        wr.serialize(r).map_err(CliError::runtime)?;
    }
    wr.flush()?;
    let table = render_table(&rows);
    std::fs::write(out.join("metrics.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Round-trip every slice or long spectrogram in a tensor file through the
/// packing layout and write the converted tensors.
pub fn pack_cmd(cfg: &RunConfig, input: &Path) -> Result<(), CliError> {
    if !input.exists() {
        return Err(CliError::Config(format!("{} does not exist", input.display())));
    }
    let file = read_tensors(input).map_err(CliError::config)?;
    let slice_shape = [PACKED_CHANNELS, MEL_BINS, SLICE_FRAMES];
    let long_shape = [1, MEL_BINS, LONG_FRAMES];
    let mut converted = BTreeMap::new();
    for (name, t) in &file.tensors {
        let items: Vec<Tensor> = if t.shape() == slice_shape || t.shape() == long_shape {
            vec![t.clone()]
        } else if t.shape().len() == 4 && (t.shape()[1..] == slice_shape || t.shape()[1..] == long_shape) {
            (0..t.batch()).map(|b| t.item_tensor(b)).collect()
        } else {
            log::warn!("skipping `{name}` with shape {:?}", t.shape());
            continue;
        };
        let mut outs = Vec::with_capacity(items.len());
        for item in items {
            let norm = NormStats::default();
            if item.shape() == slice_shape {
                let s = MelSlice::new(item, norm)?;
                let long = unpack(&s)?;
                if pack(&long)? != s {
                    return Err(CliError::Runtime(format!("`{name}`: pack(unpack(x)) != x")));
                }
                outs.push(long.data);
            } else {
                let m = LongMel::new(item, norm)?;
                let s = pack(&m)?;
                if unpack(&s)? != m {
                    return Err(CliError::Runtime(format!("`{name}`: unpack(pack(x)) != x")));
                }
                outs.push(s.data);
            }
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let t_out = if t.shape().len() == 4 { Tensor::stack(&refs)? } else { outs.remove(0) };
        log::info!("`{name}`: {:?} -> {:?}, round trip exact", t.shape(), t_out.shape());
        converted.insert(name.clone(), t_out);
    }
    let out = prepare_out(cfg, "pack")?;
    let stem = model_id(input);
    write_tensors(&out.join(format!("{stem}.converted.pdt")), &file.metadata, &converted, DType::F64)?;
    Ok(())
}

/// Write a labelled synthetic note sequence, handy as a demo corpus.
pub fn synth_cmd(cfg: &RunConfig, seconds: f64, note_seconds: f64) -> Result<(), CliError> {
    if !(seconds > 0.0 && note_seconds > 0.0 && note_seconds <= seconds) {
        return Err(CliError::Config("need 0 < note length <= duration".into()));
    }
    let out = prepare_out(cfg, "synth")?;
    let sr = cfg.mel.sample_rate;
    let len = (seconds * sr as f64).round() as usize;
    let note = (note_seconds * sr as f64).round() as usize;
    let (wave, labels) = synth::tone_sequence(len, note, sr as f64, derive_seed(cfg.seed, "synth"));
    audio::write_wav(&out.join("tones.wav"), &wave, sr)?;
    let mut wr = csv::Writer::from_path(out.join("tones.csv")).map_err(CliError::runtime)?;
    wr.write_record(["note", "start_sample", "pitch", "timbre"]).map_err(CliError::runtime)?;
    for (i, l) in labels.iter().enumerate() {
        let timbre = serde_json::to_value(l.timbre).map_err(CliError::runtime)?;
        let row = [i.to_string(), (i * note).to_string(), l.pitch.to_string(), timbre.as_str().unwrap_or("").to_string()];
        wr.write_record(&row).map_err(CliError::runtime)?;
    }
    wr.flush()?;
    Ok(())
}
