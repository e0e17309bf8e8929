//! Forward noising and the deterministic (DDIM) and ancestral samplers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::{self, NoiseSchedule};
use crate::tensor::Tensor;

/// Anything that maps a noisy batch at per-item times to an `x` estimate.
pub trait Denoiser {
    fn predict_x(&self, z: &Tensor, t: &[f64]) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_x(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        (**self).predict_x(z, t)
    }
}

/// A noisy batch and the fractional time it sits at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: f64,
}

impl LatentState {
    pub fn new(z: Tensor, t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(LatentState { z, t })
    }

    /// The state's time repeated once per batch item.
    pub fn times(&self) -> Vec<f64> {
        vec![self.t; self.z.batch()]
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `z_t = alpha_t * x0 + sigma_t * eps`
pub fn q_sample(x0: &Tensor, t: f64, eps: &Tensor) -> Result<LatentState> {
    check_time(t)?;
    let (a, s) = schedule::alpha_sigma(t);
    Ok(LatentState {
        z: x0.lincomb(a, eps, s)?,
        t,
    })
}

/// Per-item forward noising, `z_b = alpha(t_b) x_b + sigma(t_b) eps_b`.
pub fn q_sample_per_item(x0: &Tensor, t: &[f64], eps: &Tensor) -> Result<Tensor> {
    x0.ensure_same_shape(eps)?;
    if t.len() != x0.batch() {
        return Err(Error::invalid("one time per batch item required"));
    }
    let mut z = Tensor::zeros(x0.shape());
    for (b, &tb) in t.iter().enumerate() {
        check_time(tb)?;
        let (a, s) = schedule::alpha_sigma(tb);
        for ((o, &x), &e) in z.item_mut(b).iter_mut().zip(x0.item(b)).zip(eps.item(b)) {
            *o = a * x + s * e;
        }
    }
    Ok(z)
}

/// One deterministic DDIM update from `state.t` down to `t_next`.
pub fn ddim_step(state: &LatentState, x_hat: &Tensor, t_next: f64) -> Result<LatentState> {
    let (a_next, ratio, a) = ddim_coeffs(state.t, t_next)?;
    // z' = a' x + (s'/s)(z - a x)
    let z = state
        .z
        .zip_map(x_hat, |z, x| a_next * x + ratio * (z - a * x))?;
    Ok(LatentState { z, t: t_next })
}

/// DDIM update with a separate `(t, t_next)` pair per batch item.
pub fn ddim_step_per_item(z: &Tensor, x_hat: &Tensor, t: &[f64], t_next: &[f64]) -> Result<Tensor> {
    z.ensure_same_shape(x_hat)?;
    if t.len() != z.batch() || t_next.len() != z.batch() {
        return Err(Error::invalid("one time per batch item required"));
    }
    let mut out = Tensor::zeros(z.shape());
    for b in 0..z.batch() {
        let (a_next, ratio, a) = ddim_coeffs(t[b], t_next[b])?;
        for ((o, &zv), &x) in out.item_mut(b).iter_mut().zip(z.item(b)).zip(x_hat.item(b)) {
            *o = a_next * x + ratio * (zv - a * x);
        }
    }
    Ok(out)
}

/// `(alpha_next, sigma_next / sigma, alpha)` for a step `t -> t_next`.
fn ddim_coeffs(t: f64, t_next: f64) -> Result<(f64, f64, f64)> {
    check_time(t)?;
    check_time(t_next)?;
    if t_next >= t {
        return Err(Error::invalid(format!(
            "DDIM must move backwards in time (t={t} -> {t_next})"
        )));
    }
    let (a, s) = schedule::alpha_sigma(t);
    if s == 0.0 {
        return Err(Error::invalid("DDIM step from t=0 divides by sigma = 0"));
    }
    let (a_next, s_next) = schedule::alpha_sigma(t_next);
    Ok((a_next, s_next / s, a))
}

/// Deterministic `n_steps` DDIM sampling on the uniform grid `t = i / n`.
///
/// Returns the final `x_hat` (from the model call at `t = 1/n`) rather than
/// stepping to `t = 0`, so the model is never evaluated at zero noise.
pub fn sample<D, R>(denoiser: &D, n_steps: usize, shape: &[usize], rng: &mut R) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let z1 = Tensor::randn(shape, rng);
    sample_from(denoiser, n_steps, z1)
}

/// [`sample`] starting from a given `z_1`.
pub fn sample_from<D: Denoiser + ?Sized>(denoiser: &D, n_steps: usize, z1: Tensor) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let mut state = LatentState { z: z1, t: 1.0 };
    for i in (1..=n_steps).rev() {
        state.t = i as f64 / n_steps as f64;
        let x_hat = denoiser.predict_x(&state.z, &state.times())?;
        if !x_hat.is_finite() {
            return Err(Error::numeric(format!(
                "sampling step {i}/{n_steps} (t={}): non-finite prediction",
                state.t
            )));
        }
        if i == 1 {
            return Ok(x_hat);
        }
        state = ddim_step(&state, &x_hat, (i - 1) as f64 / n_steps as f64)?;
    }
    unreachable!("loop returns at i = 1")
}

/// Fixed reverse-process variance used by the ancestral sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AncestralVariance {
    /// Posterior variance (the lower bound).
    #[default]
    Posterior,
    /// Forward step variance `beta_i` (the upper bound).
    Beta,
}

/// One ancestral (DDPM) step from index `i` to `i - 1` on the discrete
/// schedule: posterior mean of `q(z_{i-1} | z_i, x = x_hat)` plus fixed
/// standard deviation times `noise`. No noise is added at `i = 1`.
pub fn ancestral_step(
    state: &LatentState,
    x_hat: &Tensor,
    i: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
    variance: AncestralVariance,
) -> Result<LatentState> {
    let steps = sched.steps();
    if i == 0 || i > steps {
        return Err(Error::invalid(format!("ancestral index {i} outside 1..={steps}")));
    }
    state.z.ensure_same_shape(x_hat)?;
    state.z.ensure_same_shape(noise)?;
    let (a_t, s_t) = (sched.alpha(i), sched.sigma(i));
    let (a_s, s_s) = (sched.alpha(i - 1), sched.sigma(i - 1));
    if s_t == 0.0 {
        return Err(Error::invalid("ancestral step from sigma = 0"));
    }
    // alpha_{t|s} and sigma^2_{t|s}; alpha_s > 0 for every i <= T
    let a_ts = a_t / a_s;
    let beta = (s_t * s_t - a_ts * a_ts * s_s * s_s).max(0.0);
    let var_t = s_t * s_t;
    let coef_z = a_ts * s_s * s_s / var_t;
    let coef_x = a_s * beta / var_t;
    let std = if i == 1 {
        0.0
    } else {
        match variance {
            AncestralVariance::Posterior => (beta * s_s * s_s / var_t).sqrt(),
            AncestralVariance::Beta => beta.sqrt(),
        }
    };
    let mut z = Tensor::zeros(state.z.shape());
    for (((o, &zt), &x), &e) in z
        .data_mut()
        .iter_mut()
        .zip(state.z.data())
        .zip(x_hat.data())
        .zip(noise.data())
    {
        *o = coef_z * zt + coef_x * x + std * e;
    }
    Ok(LatentState {
        z,
        t: sched.time(i - 1),
    })
}

/// Ancestral sampling over every index of `sched`, from `z_T ~ N(0, I)`.
pub fn sample_ancestral<D, R>(
    denoiser: &D,
    sched: &NoiseSchedule,
    shape: &[usize],
    variance: AncestralVariance,
    rng: &mut R,
) -> Result<Tensor>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let mut state = LatentState {
        z: Tensor::randn(shape, rng),
        t: 1.0,
    };
    for i in (1..=sched.steps()).rev() {
        let x_hat = denoiser.predict_x(&state.z, &state.times())?;
        if !x_hat.is_finite() {
            return Err(Error::numeric(format!(
                "ancestral step {i} (t={}): non-finite prediction",
                state.t
            )));
        }
        let noise = if i > 1 {
            Tensor::randn(shape, rng)
        } else {
            Tensor::zeros(shape)
        };
        state = ancestral_step(&state, &x_hat, i, sched, &noise, variance)?;
    }
    Ok(state.z)
}

/// Exact posterior-mean denoiser for data distributed as `N(mean, std^2 I)`:
/// `x_hat = mean + alpha s^2 / (alpha^2 s^2 + sigma^2) * (z - alpha mean)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDenoiser {
    pub mean: f64,
    pub std: f64,
}

impl GaussianDenoiser {
    pub fn posterior_mean(&self, z: f64, t: f64) -> f64 {
        let (a, s) = schedule::alpha_sigma(t);
        let var = self.std * self.std;
        self.mean + a * var / (a * a * var + s * s) * (z - a * self.mean)
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_x(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        if t.len() != z.batch() {
            return Err(Error::invalid("one time per batch item required"));
        }
        let mut out = Tensor::zeros(z.shape());
        for (b, &tb) in t.iter().enumerate() {
            for (o, &v) in out.item_mut(b).iter_mut().zip(z.item(b)) {
                *o = self.posterior_mean(v, tb);
            }
        }
        Ok(out)
    }
}
