//! Progressive distillation: a student learns to cover two teacher DDIM
//! steps with one of its own, then becomes the teacher for the next round at
//! half the step count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::denoiser::{optimize, Batch, DenoiserModel, TrainFailure, TrainLog, Trainable};
use crate::diffusion::{self, Denoiser, LatentState};
use crate::error::{Error, Result};
use crate::param::{ParamKind, WeightScheme};
use crate::schedule;
use crate::tensor::Tensor;

/// Smallest admissible `|alpha_t'' - (sigma_t'' / sigma_t) alpha_t|`.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Student step count of the first round.
    pub n0: usize,
    /// Number of halving rounds.
    pub rounds: usize,
    pub steps_per_round: usize,
    pub weighting: WeightScheme,
    pub kind: ParamKind,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            n0: 64,
            rounds: 3,
            steps_per_round: 10_000,
            weighting: WeightScheme::SnrPlusOne,
            kind: ParamKind::V,
            lr: 2e-5,
            batch_size: 8,
            seed: 0,
            log_every: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n0 < 2 {
            return Err(Error::invalid(format!("initial student steps must be at least 2, got {}", self.n0)));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("at least one distillation round is required"));
        }
        let div = u32::try_from(self.rounds)
            .ok()
            .and_then(|k| 1usize.checked_shl(k))
            .filter(|&d| d <= self.n0);
        match div {
            Some(d) if self.n0 % d == 0 => {}
            _ => {
                return Err(Error::invalid(format!(
                    "{} steps cannot be halved {} times",
                    self.n0, self.rounds
                )))
            }
        }
        if self.steps_per_round == 0 {
            return Err(Error::invalid("steps_per_round must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch_size and log_every must be positive"));
        }
        Ok(())
    }

    /// Student step counts, one per round.
    pub fn schedule(&self) -> Vec<usize> {
        (0..self.rounds).map(|k| self.n0 >> k).collect()
    }
}

fn grid_index(t: f64, n: usize) -> Result<usize> {
    let i = (t * n as f64).round();
    if i < 1.0 || (t * n as f64 - i).abs() > 1e-9 {
        return Err(Error::invalid(format!("time {t} is not on the grid i/{n} with i >= 1")));
    }
    Ok(i as usize)
}

/// The x-space target that makes one student DDIM step from `t` to `t - 1/N`
/// land where two teacher steps (`t -> t - 0.5/N -> t - 1/N`) do.
pub fn distill_target<D: Denoiser + ?Sized>(teacher: &D, state: &LatentState, n: usize) -> Result<Tensor> {
    distill_target_per_item(teacher, &state.z, &state.times(), n)
}

/// [`distill_target`] with a separate grid time per batch item.
pub fn distill_target_per_item<D: Denoiser + ?Sized>(
    teacher: &D,
    z: &Tensor,
    t: &[f64],
    n: usize,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("student step count must be positive"));
    }
    if t.len() != z.batch() {
        return Err(Error::invalid("one time per batch item required"));
    }
    for &tb in t {
        grid_index(tb, n)?;
    }
    let nf = n as f64;
    let t_mid: Vec<f64> = t.iter().map(|&tb| (tb - 0.5 / nf).max(0.0)).collect();
    let t_end: Vec<f64> = t.iter().map(|&tb| (tb - 1.0 / nf).max(0.0)).collect();

    let x1 = teacher.predict_x(z, t)?;
    let z_mid = diffusion::ddim_step_per_item(z, &x1, t, &t_mid)?;
    let x2 = teacher.predict_x(&z_mid, &t_mid)?;
    let z_end = diffusion::ddim_step_per_item(&z_mid, &x2, &t_mid, &t_end)?;

    let mut out = Tensor::zeros(z.shape());
    for b in 0..z.batch() {
        let (a, s) = schedule::alpha_sigma(t[b]);
        let (a2, s2) = schedule::alpha_sigma(t_end[b]);
        let ratio = s2 / s;
        let denom = a2 - ratio * a;
        if denom.abs() < DEGENERATE_DENOMINATOR {
            return Err(Error::DegenerateTarget { t: t[b], denominator: denom });
        }
        for ((o, &ze), &zt) in out.item_mut(b).iter_mut().zip(z_end.item(b)).zip(z.item(b)) {
            *o = (ze - ratio * zt) / denom;
        }
    }
    if !out.is_finite() {
        return Err(Error::numeric(format!("non-finite distillation target at t={t:?}")));
    }
    Ok(out)
}

/// One round: copy the teacher, then fit the copy to two-step teacher
/// targets at `t = i / n`, `i` uniform on `1..=n`.
pub fn distill_round<M: Trainable>(
    teacher: &M,
    data: &Dataset,
    n: usize,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(M, TrainLog), TrainFailure<M>> {
    let student = teacher.clone();
    let fail = |error| TrainFailure {
        error,
        step: 0,
        last_good: Box::new(teacher.clone()),
        log: TrainLog::default(),
    };
    if data.is_empty() {
        return Err(fail(Error::invalid("distillation set is empty")));
    }
    if n == 0 {
        return Err(fail(Error::invalid("student step count must be positive")));
    }
    optimize(student, cfg.steps_per_round, cfg.lr, cfg.weighting, cfg.log_every, |_| {
        let x = data.sample_batch(cfg.batch_size, rng)?;
        let t: Vec<f64> = (0..cfg.batch_size)
            .map(|_| rng.random_range(1..=n) as f64 / n as f64)
            .collect();
        let eps = Tensor::randn(x.shape(), rng);
        let z = diffusion::q_sample_per_item(&x, &t, &eps)?;
        let target = distill_target_per_item(teacher, &z, &t, n)?;
        Ok(Batch { z, t, target })
    })
}

#[derive(Debug, Clone)]
pub struct DistilledModel {
    pub n_steps: usize,
    pub model: DenoiserModel,
    pub log: TrainLog,
}

/// Run `cfg.rounds` rounds starting from `model`; each round's student is
/// the next round's teacher. Returns the student of every round in order.
pub fn progressive_distill(
    model: &DenoiserModel,
    data: &Dataset,
    cfg: &DistillConfig,
) -> std::result::Result<Vec<DistilledModel>, TrainFailure<DenoiserModel>> {
    let reject = |error| TrainFailure {
        error,
        step: 0,
        last_good: Box::new(model.clone()),
        log: TrainLog::default(),
    };
    cfg.validate().map_err(reject)?;
    if cfg.kind != model.kind {
        return Err(reject(Error::invalid(format!(
            "distillation configured for {} but the model predicts {}",
            cfg.kind, model.kind
        ))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: Vec<DistilledModel> = Vec::with_capacity(cfg.rounds);
    for n in cfg.schedule() {
        let teacher = out.last().map_or(model, |d| &d.model);
        log::info!("distilling to {n} steps");
        let (student, log) = distill_round(teacher, data, n, cfg, &mut rng)?;
        if let Some((head, tail)) = log.head_tail_means(log.records.len().min(100)) {
            log::info!("round N={n}: loss {head:.4e} -> {tail:.4e}");
        }
        out.push(DistilledModel { n_steps: n, model: student, log });
    }
    Ok(out)
}
