//! 1D U-Net denoiser over packed mel-spectrogram slices.
//!
//! A `[batch, packed, mel_bins, frames]` input is read as
//! `packed * mel_bins` channels over a `frames`-long time axis, so every
//! convolution is one-dimensional along time. The network is
//!
//! ```text
//! in 1x1 -> [ResBlock (+attn) -> skip, max-pool] x depth
//!        -> ResBlock (+attn)
//!        -> [transposed conv 2x + ReLU, concat skip, ResBlock] x depth
//!        -> out 1x1 (zero init) + skip
//! ```
//!
//! with a sinusoidal time embedding, passed through a two-layer MLP, added as
//! a per-channel bias inside every ResBlock. The narrow bulk cannot carry a
//! per-frequency identity, so a pointwise skip adds, channel by channel, the
//! posterior mean of `x` under a learned prior: a point mass at the
//! normalized floor (silent cells) mixed with a Gaussian, both depending on
//! `t` only through the embedding. It is converted into the output
//! parameterization before the sum.

mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, Denoiser};
use crate::error::{Error, Result};
use crate::nn::{self, BnBatchStats, Graph, ParamStore, Var};
use crate::param::{self, ParamKind, WeightScheme, XPredMap};
use crate::schedule::{self, ScheduleSpec};
use crate::tensor::Tensor;

pub use train::{optimize, train, Batch, LossRecord, TrainConfig, TrainFailure, TrainLog};

/// Scale applied to `t` before the sinusoidal ladder.
const TIME_SCALE: f64 = 1000.0;
const BN_MOMENTUM: f64 = 0.1;
/// Normalized value of every cell at or below the dB floor.
pub const FLOOR: f64 = -1.0;
/// The floor component of the skip prior starts nearly switched off.
const FLOOR_LOGIT_INIT: f64 = -4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Packed channels of a slice (3 for the snake layout).
    pub packed_channels: usize,
    pub mel_bins: usize,
    /// Length of the time axis the convolutions run along.
    pub frames: usize,
    pub base_width: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub time_embed_dim: usize,
    /// Self-attention after the block at each encoder level; the last entry
    /// is the bottleneck. Length `depth + 1`.
    pub use_attention: Vec<bool>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            packed_channels: 3,
            mel_bins: 128,
            frames: 128,
            base_width: 64,
            depth: 3,
            kernel_size: 3,
            time_embed_dim: 128,
            use_attention: vec![false, false, false, true],
        }
    }
}

impl UNetConfig {
    /// Small network for tests and desk-scale smoke runs.
    pub fn tiny() -> Self {
        UNetConfig {
            base_width: 16,
            depth: 2,
            time_embed_dim: 128,
            use_attention: vec![false, false, true],
            ..Default::default()
        }
    }

    pub fn in_channels(&self) -> usize {
        self.packed_channels * self.mel_bins
    }

    /// Channel width of encoder/decoder level `l`; the bottleneck reuses the
    /// deepest level's width.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level.min(self.depth - 1)
    }

    pub fn item_shape(&self) -> [usize; 3] {
        [self.packed_channels, self.mel_bins, self.frames]
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("U-Net depth must be at least 1"));
        }
        if self.base_width < 4 {
            return Err(Error::invalid("base_width must be at least 4"));
        }
        if self.frames == 0 || self.frames % (1 << self.depth) != 0 {
            return Err(Error::invalid(format!(
                "frames ({}) must be divisible by 2^depth ({})",
                self.frames,
                1 << self.depth
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be positive and even"));
        }
        if self.use_attention.len() != self.depth + 1 {
            return Err(Error::invalid(format!(
                "use_attention needs {} flags (one per level plus bottleneck)",
                self.depth + 1
            )));
        }
        if self.packed_channels == 0 || self.mel_bins == 0 {
            return Err(Error::invalid("empty input channels"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of fractional time over a geometric frequency
/// ladder: `[sin(s t f_k)..., cos(s t f_k)...]`, `f_k = 10000^(-k / half)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::invalid(format!("time embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; statistics are reported back.
    Train,
    /// Running statistics; a pure function of parameters and input.
    Eval,
}

/// Regression target for [`DenoiserModel::loss_and_grad`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Standard training: regress onto the clean data `x`.
    Data,
    /// Distillation: regress onto the teacher-derived `x_tilde`.
    Distill(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamStore,
    pub bn_stats: Vec<BnBatchStats>,
}

/// A denoiser whose parameters can be fitted by [`optimize`].
pub trait Trainable: Denoiser + Clone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Weighted x-space loss at noisy inputs `z` against `target`.
    fn loss_and_grad_z(&self, z: &Tensor, t: &[f64], target: &Tensor, weighting: WeightScheme) -> Result<LossGrad>;

    /// Fold side statistics from a training step (batch-norm running stats).
    fn commit(&mut self, _step: &LossGrad) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: UNetConfig,
    pub kind: ParamKind,
    pub schedule: ScheduleSpec,
    pub params: ParamStore,
    /// Batch-norm running statistics.
    pub buffers: ParamStore,
    pub trained_steps: u64,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(
        config: UNetConfig,
        kind: ParamKind,
        schedule: ScheduleSpec,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            params: ParamStore::new(),
            buffers: ParamStore::new(),
            kernel: config.kernel_size,
            temb: config.time_embed_dim,
            rng,
        };
        let e = config.time_embed_dim;
        init.linear("time.l1", e, e);
        init.linear("time.l2", e, e);
        let w0 = config.width(0);
        init.conv("in_proj", config.in_channels(), w0, 1);
        let mut c = w0;
        for l in 0..config.depth {
            let w = config.width(l);
            init.res_block(&format!("enc{l}"), c, w);
            if config.use_attention[l] {
                init.attention(&format!("enc{l}.attn"), w);
            }
            c = w;
        }
        init.res_block("mid", c, c);
        if config.use_attention[config.depth] {
            init.attention("mid.attn", c);
        }
        for l in (0..config.depth).rev() {
            let w = config.width(l);
            init.conv_t(&format!("up{l}"), c, w);
            init.res_block(&format!("dec{l}"), 2 * w, w);
            c = w;
        }
        let out_ch = config.in_channels() * kind.output_multiplier();
        init.params.insert("out_proj.w".into(), Tensor::zeros(&[out_ch, w0, 1]));
        init.params.insert("out_proj.b".into(), Tensor::zeros(&[out_ch]));
        let cin = config.in_channels();
        for (name, bias) in [("skip.mean", 0.0), ("skip.log_std", 0.0), ("skip.logit", FLOOR_LOGIT_INIT)] {
            init.params.insert(format!("{name}.w"), Tensor::zeros(&[cin, 2 * e]));
            init.params.insert(format!("{name}.b"), Tensor::full(&[cin], bias));
        }
        Ok(DenoiserModel {
            config,
            kind,
            schedule,
            params: init.params,
            buffers: init.buffers,
            trained_steps: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        nn::param_count(&self.params)
    }

    fn check_input(&self, z: &Tensor, t: &[f64]) -> Result<usize> {
        let b = z.batch();
        let mut want = vec![b];
        want.extend(self.config.item_shape());
        z.ensure_shape(&want)?;
        if t.len() != b {
            return Err(Error::invalid(format!("{} times for batch of {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("time {bad} outside [0, 1]")));
        }
        Ok(b)
    }

    /// Record the network on `g`; returns the raw output variable shaped
    /// `[batch, packed * multiplier, mel_bins, frames]`.
    pub fn build(&self, g: &mut Graph, z: &Tensor, t: &[f64], mode: Mode) -> Result<Var> {
        let b = self.check_input(z, t)?;
        let cfg = &self.config;
        let x = g.input(z.clone().reshape(&[b, cfg.in_channels(), cfg.frames])?);
        let mut emb = Vec::with_capacity(b * cfg.time_embed_dim);
        for &tb in t {
            emb.extend(time_embedding(tb, cfg.time_embed_dim)?);
        }
        let emb = g.input(Tensor::from_vec(&[b, cfg.time_embed_dim], emb)?);
        let mut net = Net { g, model: self, mode };
        let h = net.linear("time.l1", emb)?;
        let h = net.g.relu(h);
        let temb = net.linear("time.l2", h)?;

        let mut h = net.conv("in_proj", x, 0)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            h = net.res_block(&format!("enc{l}"), h, temb)?;
            if cfg.use_attention[l] {
                h = net.attention(&format!("enc{l}.attn"), h)?;
            }
            skips.push(h);
            h = net.g.max_pool2(h)?;
        }
        h = net.res_block("mid", h, temb)?;
        if cfg.use_attention[cfg.depth] {
            h = net.attention("mid.attn", h)?;
        }
        for l in (0..cfg.depth).rev() {
            let up = net.conv_t(&format!("up{l}"), h)?;
            let up = net.g.relu(up);
            let cat = net.g.concat(up, skips[l])?;
            h = net.res_block(&format!("dec{l}"), cat, temb)?;
        }
        let out = net.conv("out_proj", h, 0)?;
        let mult = self.kind.output_multiplier();
        // pointwise posterior mean under a learned per-channel prior, mapped
        // into the output parameterization
        let coeffs = param::coeffs_at(t);
        let e = cfg.time_embed_dim;
        let (a3, b3) = (net.g.reshape(temb, &[b, e, 1])?, net.g.reshape(emb, &[b, e, 1])?);
        let feats = net.g.concat(a3, b3)?;
        let feats = net.g.reshape(feats, &[b, 2 * e])?;
        let mean = net.linear("skip.mean", feats)?;
        let log_std = net.linear("skip.log_std", feats)?;
        let logit = net.linear("skip.logit", feats)?;
        let x_hat = net.g.floor_mixture(x, mean, log_std, logit, &coeffs, FLOOR)?;
        // eps = (z - alpha x) / sigma, v = (alpha z - x) / sigma; at sigma = 0
        // the network output alone determines the (unused) noise heads
        let per_sigma = |f: fn(f64, f64) -> (f64, f64)| -> (Vec<f64>, Vec<f64>) {
            coeffs.iter().map(|&(a, s)| if s > 0.0 { f(a, s) } else { (0.0, 0.0) }).unzip()
        };
        let eps_of = |g: &mut Graph| -> Result<Var> {
            let (cz, cx) = per_sigma(|a, s| (1.0 / s, -a / s));
            g.item_lincomb(x, x_hat, &cz, &cx)
        };
        let skip = match self.kind {
            ParamKind::X => x_hat,
            ParamKind::Eps => eps_of(net.g)?,
            ParamKind::V => {
                let (cz, cx) = per_sigma(|a, s| (a / s, -1.0 / s));
                net.g.item_lincomb(x, x_hat, &cz, &cx)?
            }
            ParamKind::XEps => {
                let eps = eps_of(net.g)?;
                net.g.concat(x_hat, eps)?
            }
        };
        let out = net.g.add(out, skip)?;
        net.g
            .reshape(out, &[b, cfg.packed_channels * mult, cfg.mel_bins, cfg.frames])
    }

    pub fn forward_with_mode(&self, z: &Tensor, t: &[f64], mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.build(&mut g, z, t, mode)?;
        Ok(g.take_value(out))
    }

    /// Inference-mode raw network output.
    pub fn forward(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward_with_mode(z, t, Mode::Eval)
    }

    /// Weighted reconstruction loss `mean_b w(lambda_b) * mean(|target_b - x_hat_b|^2)`
    /// with `z = alpha x + sigma eps`, and its gradient for every parameter.
    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        t: &[f64],
        eps: &Tensor,
        target: Target<'_>,
        weighting: WeightScheme,
    ) -> Result<LossGrad> {
        let z = diffusion::q_sample_per_item(x, t, eps)?;
        let target = match target {
            Target::Data => x,
            Target::Distill(xt) => xt,
        };
        self.loss_and_grad_z(&z, t, target, weighting)
    }

    fn loss_and_grad_mode(
        &self,
        z: &Tensor,
        t: &[f64],
        target: &Tensor,
        weighting: WeightScheme,
        mode: Mode,
    ) -> Result<LossGrad> {
        target.ensure_same_shape(z)?;
        let mut g = Graph::new();
        let out = self.build(&mut g, z, t, mode)?;
        let (loss, seed) = weighted_x_loss(g.value(out), self.kind, z, t, target, weighting)?;
        let grads = g.backward(out, seed)?;
        Ok(LossGrad {
            loss,
            grads,
            bn_stats: g.bn_stats().to_vec(),
        })
    }

    /// Loss and gradients with batch norm in inference mode.
    pub fn loss_and_grad_eval(&self, z: &Tensor, t: &[f64], target: &Tensor, weighting: WeightScheme) -> Result<LossGrad> {
        self.loss_and_grad_mode(z, t, target, weighting, Mode::Eval)
    }

    /// Blend observed batch statistics into the running statistics.
    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats]) {
        for s in stats {
            for (key, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{}.{key}", s.prefix)) {
                    for (r, &v) in buf.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        nn::all_finite(&self.params) && nn::all_finite(&self.buffers)
    }
}

/// Loss value and `dL/d(raw output)` for the weighted x-space objective.
///
/// Items with zero weight contribute nothing and are skipped, which keeps
/// `eps` models trainable under SNR weighting at `alpha = 0`.
pub fn weighted_x_loss(
    out: &Tensor,
    kind: ParamKind,
    z: &Tensor,
    t: &[f64],
    target: &Tensor,
    weighting: WeightScheme,
) -> Result<(f64, Tensor)> {
    param::check_output_shape(out, kind, z)?;
    let b = z.batch();
    let n = z.item_len();
    let mut seed = Tensor::zeros(out.shape());
    let mut loss = 0.0;
    let mut x_hat = vec![0.0; n];
    for (bi, &tb) in t.iter().enumerate() {
        let w = param::loss_weight_at(tb, weighting);
        if w == 0.0 {
            continue;
        }
        let (a, s) = schedule::alpha_sigma(tb);
        let map = XPredMap::new(kind, a, s)?;
        map.apply_into(out.item(bi), z.item(bi), &mut x_hat);
        let tgt = target.item(bi);
        let scale = 2.0 * w / (n * b) as f64;
        let mut item_loss = 0.0;
        let seed_item = seed.item_mut(bi);
        for k in 0..n {
            let d = x_hat[k] - tgt[k];
            item_loss += d * d;
            seed_item[k] = scale * d * map.out;
            if seed_item.len() == 2 * n {
                seed_item[n + k] = scale * d * map.eps_out;
            }
        }
        loss += w * item_loss / (n * b) as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at t={tb}")));
        }
    }
    Ok((loss, seed))
}

impl Denoiser for DenoiserModel {
    fn predict_x(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        let out = self.forward(z, t)?;
        param::to_x_prediction_per_item(&out, self.kind, z, &param::coeffs_at(t))
    }
}

impl Trainable for DenoiserModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss_and_grad_z(&self, z: &Tensor, t: &[f64], target: &Tensor, weighting: WeightScheme) -> Result<LossGrad> {
        self.loss_and_grad_mode(z, t, target, weighting, Mode::Train)
    }

    fn commit(&mut self, step: &LossGrad) {
        self.apply_bn_stats(&step.bn_stats);
        self.trained_steps += 1;
    }
}

struct Init<'r, R: Rng + ?Sized> {
    params: ParamStore,
    buffers: ParamStore,
    kernel: usize,
    temb: usize,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let w = nn::he_normal(&[cout, cin, k], cin * k, self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) {
        let w = nn::he_normal(&[cin, cout, 2], cin, self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        let w = nn::lecun_normal(&[fout, fin], fin, self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }

    fn res_block(&mut self, p: &str, cin: usize, cout: usize) {
        let k = self.kernel;
        self.conv(&format!("{p}.conv1"), cin, cout, k);
        self.bn(&format!("{p}.bn1"), cout);
        self.linear(&format!("{p}.temb"), self.temb, cout);
        self.conv(&format!("{p}.conv2"), cout, cout, k);
        self.bn(&format!("{p}.bn2"), cout);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cin, cout, 1);
        }
    }

    fn attention(&mut self, p: &str, c: usize) {
        for part in ["q", "k", "v"] {
            let w = nn::lecun_normal(&[c, c, 1], c, self.rng);
            self.params.insert(format!("{p}.{part}.w"), w);
            self.params.insert(format!("{p}.{part}.b"), Tensor::zeros(&[c]));
        }
        self.conv(&format!("{p}.out"), c, c, 1);
    }
}

struct Net<'g> {
    g: &'g mut Graph,
    model: &'g DenoiserModel,
    mode: Mode,
}

impl Net<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.g.param(&self.model.params, name)
    }

    fn conv(&mut self, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.conv1d(x, w, b, pad)
    }

    fn conv_t(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.conv_transpose2(x, w, b)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.linear(x, w, b)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => self.g.batch_norm(x, gamma, beta, name, None),
            Mode::Eval => {
                let bufs = &self.model.buffers;
                let get = |k: &str| {
                    bufs.get(&format!("{name}.{k}"))
                        .ok_or_else(|| Error::invalid(format!("missing buffer `{name}.{k}`")))
                };
                let (m, v) = (get("running_mean")?, get("running_var")?);
                self.g.batch_norm(x, gamma, beta, name, Some((m.data(), v.data())))
            }
        }
    }

    fn res_block(&mut self, p: &str, x: Var, temb: Var) -> Result<Var> {
        let pad = self.model.config.kernel_size / 2;
        let h = self.conv(&format!("{p}.conv1"), x, pad)?;
        let h = self.bn(&format!("{p}.bn1"), h)?;
        let h = self.g.relu(h);
        let tb = self.linear(&format!("{p}.temb"), temb)?;
        let h = self.g.add_channel(h, tb)?;
        let h = self.conv(&format!("{p}.conv2"), h, pad)?;
        let h = self.bn(&format!("{p}.bn2"), h)?;
        let skip = if self.model.params.contains_key(&format!("{p}.skip.w")) {
            self.conv(&format!("{p}.skip"), x, 0)?
        } else {
            x
        };
        let sum = self.g.add(h, skip)?;
        Ok(self.g.relu(sum))
    }

    fn attention(&mut self, p: &str, x: Var) -> Result<Var> {
        let q = self.conv(&format!("{p}.q"), x, 0)?;
        let k = self.conv(&format!("{p}.k"), x, 0)?;
        let v = self.conv(&format!("{p}.v"), x, 0)?;
        let a = self.g.attention(q, k, v)?;
        let o = self.conv(&format!("{p}.out"), a, 0)?;
        self.g.add(x, o)
    }
}
