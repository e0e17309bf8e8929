use std::path::{Path, PathBuf};
use std::process::Command;

use pdd_core::denoiser::{DenoiserModel, UNetConfig};
use pdd_core::param::ParamKind;
use pdd_core::schedule::ScheduleSpec;
use pdd_core::store::{read_tensors, Checkpoint};
use rand::SeedableRng;

const CONFIG: &str = r#"
seed = 11

[model.unet]
base_width = 4
depth = 1
time_embed_dim = 8
use_attention = [false, false]

[model.schedule]
steps = 100

[train]
steps = 3
batch_size = 2

[distill]
n0 = 4
rounds = 2
steps_per_round = 2
batch_size = 2

[sample]
count = 2
batch_size = 2
griffin_lim_iterations = 2

[eval.extractor_training]
steps = 5
examples_per_class = 1
"#;

fn pdd(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_pdd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("pdd {args:?}:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_rows(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("manifest.csv")).unwrap().lines().count() - 1
}

fn files_in(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().count()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, CONFIG).unwrap();
        Workspace { _tmp: tmp, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> i32 {
        let out = self.path(out);
        let mut args = vec![cmd, "--config", s(&self.config), "--out", s(&out)];
        args.extend_from_slice(extra);
        pdd(&args)
    }
}

#[test]
fn full_pipeline() {
    let w = Workspace::new();
    assert_eq!(w.run("synth", "audio", &["--seconds", "20"]), 0);
    let audio = w.path("audio");

    assert_eq!(w.run("ingest", "data", &["--audio-dir", s(&audio)]), 0);
    let data = w.path("data");
    // 20 s gives 858 frames: two windows of 384
    assert_eq!(manifest_rows(&data), 2);
    assert!(data.join("norm_stats.json").exists());
    assert!(data.join("ingest.config.toml").exists());
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(w.run("ingest", "data", &["--audio-dir", s(&audio)]), 0);
    assert_eq!(std::fs::read_to_string(data.join("manifest.csv")).unwrap(), manifest);
    assert_eq!(files_in(&data.join("slices")), 2);

    assert_eq!(w.run("train", "train", &["--data", s(&data)]), 0);
    let ck = w.path("train/checkpoint.pdt");
    let loss = std::fs::read_to_string(w.path("train/loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss,lr\n"));
    assert_eq!(loss.lines().count(), 4);
    // same config and seed reproduce the checkpoint byte for byte
    let first = std::fs::read(&ck).unwrap();
    assert_eq!(w.run("train", "train2", &["--data", s(&data)]), 0);
    assert_eq!(std::fs::read(w.path("train2/checkpoint.pdt")).unwrap(), first);
    // and so does the written effective config on its own
    let effective = w.path("train/train.config.toml");
    assert_eq!(pdd(&["train", "--config", s(&effective), "--out", s(&w.path("train3"))]), 0);
    assert_eq!(std::fs::read(w.path("train3/checkpoint.pdt")).unwrap(), first);

    assert_eq!(w.run("distill", "distill", &["--data", s(&data), "--checkpoint", s(&ck)]), 0);
    for n in [4, 2] {
        let path = w.path(&format!("distill/model_N{n}.pdt"));
        assert_eq!(Checkpoint::load(&path).unwrap().sampling_steps, Some(n));
    }
    assert!(!w.path("distill/model_N1.pdt").exists());

    let student = w.path("distill/model_N2.pdt");
    assert_eq!(w.run("sample", "samples", &["--checkpoint", s(&student), "--steps", "1"]), 0);
    let samples = w.path("samples");
    assert_eq!(files_in(&samples.join("wav")), 2);
    let packed = read_tensors(&samples.join("slices.pdt")).unwrap();
    assert_eq!(packed.tensors["samples"].shape(), &[2, 3, 128, 128]);
    let long = read_tensors(&samples.join("long_mels.pdt")).unwrap();
    assert_eq!(long.tensors["long_mels"].shape(), &[2, 1, 128, 384]);

    let args = ["--generated", s(&samples), "--reference", s(&samples)];
    assert_eq!(w.run("eval", "eval", &args), 0);
    let mut rd = csv::Reader::from_path(w.path("eval/metrics.csv")).unwrap();
    let headers: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["model", "steps", "pis", "iis", "pkid", "ikid", "fad"]);
    let row = rd.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "model_N2");
    assert_eq!(&row[1], "1");
    let fad: f64 = row[6].parse().unwrap();
    assert!(fad.abs() < 1e-6, "FAD of a set against itself: {fad}");
    assert!(w.path("eval/extractor.pdt").exists());

    assert_eq!(w.run("pack", "pack", &[s(&samples.join("slices.pdt"))]), 0);
    let conv = read_tensors(&w.path("pack/slices.converted.pdt")).unwrap();
    assert_eq!(conv.tensors["samples"].shape(), &[2, 1, 128, 384]);
}

#[test]
fn ingest_edge_cases() {
    let w = Workspace::new();
    let empty = w.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(w.run("ingest", "out-empty", &["--audio-dir", s(&empty)]), 0);
    assert_eq!(manifest_rows(&w.path("out-empty")), 0);

    assert_eq!(w.run("synth", "mixed", &["--seconds", "10"]), 0);
    std::fs::write(w.path("mixed/broken.wav"), b"not a wav file").unwrap();
    assert_eq!(w.run("ingest", "out-mixed", &["--audio-dir", s(&w.path("mixed"))]), 3);
    assert_eq!(manifest_rows(&w.path("out-mixed")), 1);
}

#[test]
fn configuration_errors_exit_one_before_any_work() {
    let w = Workspace::new();
    let bad = w.path("bad.toml");
    std::fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    assert_eq!(pdd(&["train", "--config", s(&bad), "--out", s(&w.path("x"))]), 1);
    assert_eq!(w.run("train", "y", &["--data", s(&w.path("missing"))]), 1);
    assert!(!w.path("y").exists());
    assert_eq!(pdd(&["ingest", "--audio-dir", s(&w.root)]), 1, "no output directory");
    assert_eq!(w.run("distill", "z", &["--rounds", "9"]), 1);
}

#[test]
fn sample_rejects_foreign_slice_layout() {
    let w = Workspace::new();
    let cfg = UNetConfig { base_width: 4, depth: 1, time_embed_dim: 8, use_attention: vec![false, false], ..Default::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = DenoiserModel::new(cfg, ParamKind::V, ScheduleSpec::default(), &mut rng).unwrap();
    let mut ck = Checkpoint::new(model, None, None);
    let good = w.path("good.pdt");
    ck.save(&good).unwrap();
    ck.layout = "row-major-v0".into();
    let foreign = w.path("foreign.pdt");
    ck.save(&foreign).unwrap();
    assert_eq!(w.run("sample", "bad", &["--checkpoint", s(&foreign), "--steps", "1", "--no-wav"]), 1);
    // an untrained model still samples with a single step
    assert_eq!(w.run("sample", "ok", &["--checkpoint", s(&good), "--steps", "1", "--count", "1"]), 0);
    assert_eq!(files_in(&w.path("ok/wav")), 1);
}
