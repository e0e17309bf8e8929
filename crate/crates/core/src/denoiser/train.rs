use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, Trainable};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, cosine_annealing_lr, Adam, AdamConfig};
use crate::param::WeightScheme;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::diffusion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weighting: WeightScheme,
    pub seed: u64,
    /// Record the loss every this many steps (the last step is always kept).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            steps: 10_000,
            batch_size: 8,
            weighting: WeightScheme::SnrPlusOne,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the first and last `window` records.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |rs: &[LossRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..window]), mean(&self.records[n - window..])))
    }
}

/// Optimization stopped early; carries the last parameters that were
/// entirely finite.
#[derive(Debug)]
pub struct TrainFailure<M> {
    pub error: Error,
    pub step: usize,
    pub last_good: Box<M>,
    pub log: TrainLog,
}

impl<M> fmt::Display for TrainFailure<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed at step {}: {}", self.step, self.error)
    }
}

impl<M: fmt::Debug> std::error::Error for TrainFailure<M> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl<M> From<TrainFailure<M>> for Error {
    fn from(f: TrainFailure<M>) -> Self {
        f.error
    }
}

/// A training batch: noisy inputs, their times and the regression target.
pub struct Batch {
    pub z: Tensor,
    pub t: Vec<f64>,
    pub target: Tensor,
}

/// Adam with cosine-annealed learning rate over `steps` updates, drawing
/// each batch from `make_batch(step)`.
pub fn optimize<M, F>(
    mut model: M,
    steps: usize,
    base_lr: f64,
    weighting: WeightScheme,
    log_every: usize,
    mut make_batch: F,
) -> std::result::Result<(M, TrainLog), TrainFailure<M>>
where
    M: Trainable,
    F: FnMut(usize) -> Result<Batch>,
{
    let mut opt = Adam::new(AdamConfig::default());
    let mut log = TrainLog::default();
    for step in 0..steps {
        let lr = cosine_annealing_lr(base_lr, step, steps);
        let outcome = make_batch(step).and_then(|b| {
            let lg = model.loss_and_grad_z(&b.z, &b.t, &b.target, weighting)?;
            if !nn::all_finite(&lg.grads) {
                return Err(Error::numeric(format!("non-finite gradient at t={:?}", b.t)));
            }
            Ok(lg)
        });
        let lg = match outcome {
            Ok(lg) => lg,
            Err(error) => {
                return Err(TrainFailure { error, step, last_good: Box::new(model), log });
            }
        };
        let before = model.clone();
        if let Err(error) = opt.update(model.params_mut(), &lg.grads, lr) {
            return Err(TrainFailure { error, step, last_good: Box::new(before), log });
        }
        model.commit(&lg);
        if !nn::all_finite(model.params()) {
            let error = Error::numeric(format!("parameters became non-finite at step {step}"));
            return Err(TrainFailure { error, step, last_good: Box::new(before), log });
        }
        if step % log_every == 0 || step + 1 == steps {
            log.records.push(LossRecord { step, loss: lg.loss, lr });
            log::debug!("step {step}: loss {:.6e} lr {lr:.3e}", lg.loss);
        }
    }
    Ok((model, log))
}

/// Fit a denoiser to `data` under the discrete schedule: each item gets
/// `t = i / T` with `i` uniform on `1..=T` and fresh Gaussian noise.
pub fn train(
    model: DenoiserModel,
    data: &Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> std::result::Result<(DenoiserModel, TrainLog), TrainFailure<DenoiserModel>> {
    let fail = |model: DenoiserModel, error| TrainFailure {
        error,
        step: 0,
        last_good: Box::new(model),
        log: TrainLog::default(),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(model, e));
    }
    if data.is_empty() {
        return Err(fail(model, Error::invalid("training set is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_total = sched.steps();
    optimize(model, cfg.steps, cfg.lr, cfg.weighting, cfg.log_every, |_| {
        let x = data.sample_batch(cfg.batch_size, &mut rng)?;
        let t: Vec<f64> = (0..cfg.batch_size)
            .map(|_| sched.time(rng.random_range(1..=steps_total)))
            .collect();
        let eps = Tensor::randn(x.shape(), &mut rng);
        let z = diffusion::q_sample_per_item(&x, &t, &eps)?;
        Ok(Batch { z, t, target: x })
    })
}
