use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_gaussian, frechet_distance, inception_score, mmd2_imq, DMatrix, ProbMatrix};
use crate::audio::{self, synth, MelTransform, NormStats};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, Graph, ParamStore, Var};
use crate::tensor::Tensor;

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub width: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

/// `shift -> 4x max-pool -> conv -> ReLU -> mean over time -> linear
/// (embedding) -> linear -> softmax`. The shift maps the normalized floor
/// (-1) to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if c.kernel % 2 == 0 || c.width == 0 || c.embed_dim == 0 || c.classes < 2 {
            return Err(Error::invalid("classifier needs an odd kernel, positive sizes and 2+ classes"));
        }
        let mut params = ParamStore::new();
        params.insert("conv.w".into(), nn::he_normal(&[c.width, c.in_channels, c.kernel], c.in_channels * c.kernel, rng));
        params.insert("conv.b".into(), Tensor::zeros(&[c.width]));
        params.insert("embed.w".into(), nn::lecun_normal(&[c.embed_dim, c.width], c.width, rng));
        params.insert("embed.b".into(), Tensor::zeros(&[c.embed_dim]));
        params.insert("head.w".into(), nn::lecun_normal(&[c.classes, c.embed_dim], c.embed_dim, rng));
        params.insert("head.b".into(), Tensor::zeros(&[c.classes]));
        Ok(Classifier { config, params })
    }

    /// Returns `(embedding, logits)` for `x: [batch, in_channels, length]`.
    fn build(&self, g: &mut Graph, x: Tensor) -> Result<(Var, Var)> {
        let p = |g: &mut Graph, n: &str| g.param(&self.params, n);
        let x = g.input(x.map(|v| v + 1.0));
        let x = g.max_pool2(x)?;
        let x = g.max_pool2(x)?;
        let (w, b) = (p(g, "conv.w")?, p(g, "conv.b")?);
        let h = g.conv1d(x, w, b, self.config.kernel / 2)?;
        let h = g.relu(h);
        let h = g.mean_time(h)?;
        let (w, b) = (p(g, "embed.w")?, p(g, "embed.b")?);
        let emb = g.linear(h, w, b)?;
        let (w, b) = (p(g, "head.w")?, p(g, "head.b")?);
        let logits = g.linear(emb, w, b)?;
        Ok((emb, logits))
    }

    fn forward(&self, x: Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let (emb, logits) = self.build(&mut g, x)?;
        Ok((g.value(emb).clone(), softmax_rows(g.value(logits))))
    }

    /// Mean cross-entropy and its gradients.
    fn loss_and_grad(&self, x: Tensor, labels: &[usize]) -> Result<(f64, ParamStore)> {
        let mut g = Graph::new();
        let (_, logits) = self.build(&mut g, x)?;
        let probs = softmax_rows(g.value(logits));
        let (b, c) = (labels.len(), self.config.classes);
        let mut seed = probs.scale(1.0 / b as f64);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= probs.data()[i * c + y].max(1e-300).ln() / b as f64;
            seed.data_mut()[i * c + y] -= 1.0 / b as f64;
        }
        Ok((loss, g.backward(logits, seed)?))
    }
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Pitch,
    Instrument,
}

/// Pitch and instrument classifiers over packed spectrogram slices.
#[derive(Debug, Clone, PartialEq)]
pub struct StandInExtractor {
    pub pitch: Classifier,
    pub instrument: Classifier,
}

/// Penultimate-layer embeddings and class probabilities, one row per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub pitch_emb: DMatrix<f64>,
    pub pitch_prob: DMatrix<f64>,
    pub inst_emb: DMatrix<f64>,
    pub inst_prob: DMatrix<f64>,
}

impl Features {
    /// Both embeddings side by side.
    pub fn joint_embedding(&self) -> DMatrix<f64> {
        let (n, a, b) = (self.pitch_emb.nrows(), self.pitch_emb.ncols(), self.inst_emb.ncols());
        DMatrix::from_fn(n, a + b, |i, j| if j < a { self.pitch_emb[(i, j)] } else { self.inst_emb[(i, j - a)] })
    }
}

impl StandInExtractor {
    fn classifier(&self, head: Head) -> &Classifier {
        match head {
            Head::Pitch => &self.pitch,
            Head::Instrument => &self.instrument,
        }
    }

    /// Stack slices (`[packed, bins, frames]`) into `[batch, packed*bins, frames]`.
    fn batch_input(&self, slices: &[&Tensor]) -> Result<Tensor> {
        let want = self.pitch.config.in_channels;
        let first = slices.first().ok_or_else(|| Error::invalid("no slices to embed"))?;
        let s = first.shape();
        if s.len() != 3 || s[0] * s[1] != want {
            return Err(Error::ShapeMismatch { expected: vec![want], actual: s.to_vec() });
        }
        let stacked = Tensor::stack(slices)?;
        stacked.reshape(&[slices.len(), want, s[2]])
    }

    pub fn features(&self, slices: &[Tensor]) -> Result<Features> {
        if slices.is_empty() {
            return Err(Error::invalid("no slices to embed"));
        }
        let mut parts: [Vec<f64>; 4] = Default::default();
        for chunk in slices.chunks(CHUNK) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let x = self.batch_input(&refs)?;
            let (pe, pp) = self.pitch.forward(x.clone())?;
            let (ie, ip) = self.instrument.forward(x)?;
            for (dst, src) in parts.iter_mut().zip([pe, pp, ie, ip]) {
                dst.extend_from_slice(src.data());
            }
        }
        let n = slices.len();
        let [pe, pp, ie, ip] = parts;
        let mk = |data: Vec<f64>| DMatrix::from_row_slice(n, data.len() / n, &data);
        Ok(Features { pitch_emb: mk(pe), pitch_prob: mk(pp), inst_emb: mk(ie), inst_prob: mk(ip) })
    }

    pub fn accuracy(&self, set: &ToneSet, head: Head) -> Result<f64> {
        let f = self.features(&set.slices)?;
        let (probs, labels) = match head {
            Head::Pitch => (&f.pitch_prob, &set.pitch),
            Head::Instrument => (&f.inst_prob, &set.timbre),
        };
        let hits = probs
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i) == Some(y))
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Train both heads on a labelled tone set.
    pub fn train(set: &ToneSet, cfg: &ExtractorConfig) -> Result<Self> {
        let first = set.slices.first().ok_or_else(|| Error::invalid("empty tone set"))?;
        let in_channels = first.shape()[0] * first.shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut make = |classes| {
            Classifier::new(
                ClassifierConfig { in_channels, width: cfg.width, kernel: cfg.kernel, embed_dim: cfg.embed_dim, classes },
                &mut rng,
            )
        };
        let mut ex = StandInExtractor {
            pitch: make(synth::PITCH_CLASSES)?,
            instrument: make(synth::Timbre::ALL.len())?,
        };
        for head in [Head::Pitch, Head::Instrument] {
            let labels = match head {
                Head::Pitch => &set.pitch,
                Head::Instrument => &set.timbre,
            };
            let mut opt = Adam::new(AdamConfig::default());
            let mut order: Vec<usize> = (0..set.slices.len()).collect();
            let mut cursor = order.len();
            for step in 0..cfg.steps {
                let mut idx = Vec::with_capacity(cfg.batch_size);
                while idx.len() < cfg.batch_size {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    idx.push(order[cursor]);
                    cursor += 1;
                }
                let refs: Vec<&Tensor> = idx.iter().map(|&i| &set.slices[i]).collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let x = ex.batch_input(&refs)?;
                let clf = ex.classifier(head);
                let (loss, grads) = clf.loss_and_grad(x, &y)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("extractor loss diverged at step {step}")));
                }
                let lr = nn::cosine_annealing_lr(cfg.lr, step, cfg.steps);
                let clf = match head {
                    Head::Pitch => &mut ex.pitch,
                    Head::Instrument => &mut ex.instrument,
                };
                opt.update(&mut clf.params, &grads, lr)?;
                if step % 50 == 0 {
                    log::debug!("{head:?} classifier step {step}: loss {loss:.4}");
                }
            }
        }
        Ok(ex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub width: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training tones per (pitch, timbre) pair.
    pub examples_per_class: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            width: 16,
            kernel: 3,
            embed_dim: 16,
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            examples_per_class: 3,
        }
    }
}

/// Packed slices of single synthetic notes with their labels.
#[derive(Debug, Clone, Default)]
pub struct ToneSet {
    pub slices: Vec<Tensor>,
    pub pitch: Vec<usize>,
    pub timbre: Vec<usize>,
}

/// `per_class` notes for every (pitch, timbre) pair with random level and
/// up to 20 cents of detuning, as normalized packed slices.
pub fn tone_slices(per_class: usize, seed: u64, transform: &MelTransform, norm: &NormStats) -> Result<ToneSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = transform.config().sample_rate as f64;
    let len = transform.samples_for_frames(audio::LONG_FRAMES);
    let mut set = ToneSet::default();
    for pitch in 0..synth::PITCH_CLASSES {
        for timbre in synth::Timbre::ALL {
            for _ in 0..per_class {
                let cents: f64 = rng.random_range(-20.0..20.0);
                let amp = rng.random_range(0.2..0.9);
                let f = synth::pitch_hz(pitch) * 2f64.powf(cents / 1200.0);
                let wave = synth::note(f, timbre, len, sr, amp);
                let slice = audio::pack(&transform.long_mel(&wave, norm)?)?;
                set.slices.push(slice.data);
                set.pitch.push(pitch);
                set.timbre.push(timbre.index());
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pis: f64,
    pub iis: f64,
    pub pkid: f64,
    pub ikid: f64,
    pub fad: f64,
}

/// Score `generated` slices against `reference` slices.
pub fn evaluate(ex: &StandInExtractor, generated: &[Tensor], reference: &[Tensor]) -> Result<MetricsReport> {
    let g = ex.features(generated)?;
    let r = ex.features(reference)?;
    Ok(MetricsReport {
        pis: inception_score(&ProbMatrix::new(g.pitch_prob.clone())?),
        iis: inception_score(&ProbMatrix::new(g.inst_prob.clone())?),
        pkid: mmd2_imq(&r.pitch_emb, &g.pitch_emb)?,
        ikid: mmd2_imq(&r.inst_emb, &g.inst_emb)?,
        fad: frechet_distance(&fit_gaussian(&r.joint_embedding())?, &fit_gaussian(&g.joint_embedding())?)?,
    })
}
