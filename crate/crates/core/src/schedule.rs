//! Variance-preserving cosine noise schedule.
//!
//! Signal and noise coefficients are `alpha(t) = cos(pi t / 2)` and
//! `sigma(t) = sin(pi t / 2)` for fractional time `t` in `[0, 1]`. Samplers
//! and the distiller evaluate them analytically at arbitrary `t`; the
//! tabulated [`NoiseSchedule`] exists for the discrete-time ancestral sampler
//! and for training-time index sampling.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal coefficient at fractional time `t`. Exact at both endpoints.
pub fn alpha(t: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        (FRAC_PI_2 * t).cos()
    }
}

/// Noise coefficient at fractional time `t`. Exact at both endpoints.
pub fn sigma(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        (FRAC_PI_2 * t).sin()
    }
}

/// `(alpha(t), sigma(t))`
pub fn alpha_sigma(t: f64) -> (f64, f64) {
    (alpha(t), sigma(t))
}

/// Log signal-to-noise ratio `log(alpha^2 / sigma^2)` at interior `t`.
pub fn log_snr_at(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::OutOfDomain(format!(
            "log-SNR is infinite at t={t}; only 0 < t < 1 is finite"
        )));
    }
    let (a, s) = alpha_sigma(t);
    Ok(2.0 * (a / s).ln())
}

/// Schedule identity as stored in checkpoints and run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub family: ScheduleFamily,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Cosine,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            family: ScheduleFamily::Cosine,
            steps: 1000,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.family {
            ScheduleFamily::Cosine => make_cosine_schedule(self.steps),
        }
    }
}

/// Discretized schedule over indices `0..=T`, index `i` at time `i / T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn make_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let (alpha, sigma) = (0..=steps)
        .map(|i| alpha_sigma(i as f64 / steps as f64))
        .unzip();
    Ok(NoiseSchedule {
        steps,
        alpha,
        sigma,
    })
}

impl NoiseSchedule {
    /// Number of discrete steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Per-step forward variance `beta_i = 1 - alpha_i^2 / alpha_{i-1}^2`,
    /// for `1 <= i <= T`. `beta_T = 1` since `alpha_T = 0`.
    pub fn beta(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.steps {
            return Err(Error::OutOfDomain(format!(
                "beta index {i} outside 1..={}",
                self.steps
            )));
        }
        let ratio = self.alpha[i] / self.alpha[i - 1];
        Ok(1.0 - ratio * ratio)
    }

    pub fn log_snr(&self, i: usize) -> Result<f64> {
        if i == 0 || i >= self.steps {
            return Err(Error::OutOfDomain(format!(
                "log-SNR is infinite at endpoint index {i} (T={})",
                self.steps
            )));
        }
        let r = self.alpha[i] / self.sigma[i];
        Ok(2.0 * r.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = make_cosine_schedule(1000).unwrap();
        assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
        assert_eq!((s.alpha(1000), s.sigma(1000)), (0.0, 1.0));
    }

    #[test]
    fn midpoint_of_two_steps() {
        let s = make_cosine_schedule(2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.alpha(1) - h).abs() < 1e-15);
        assert!((s.sigma(1) - h).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(make_cosine_schedule(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn variance_preserving_and_monotone() {
        let s = make_cosine_schedule(1000).unwrap();
        for i in 0..=1000 {
            let a = s.alpha(i);
            let g = s.sigma(i);
            assert!((a * a + g * g - 1.0).abs() < 1e-12);
            if i > 0 {
                assert!(a < s.alpha(i - 1));
                assert!(g > s.sigma(i - 1));
            }
        }
    }

    #[test]
    fn log_snr_values_and_domain() {
        let s = make_cosine_schedule(1000).unwrap();
        assert!(s.log_snr(500).unwrap().abs() < 1e-12);
        assert!(matches!(s.log_snr(1000), Err(Error::OutOfDomain(_))));
        assert!(matches!(s.log_snr(0), Err(Error::OutOfDomain(_))));
        let mut prev = f64::INFINITY;
        for i in 1..1000 {
            let l = s.log_snr(i).unwrap();
            assert!(l < prev);
            prev = l;
        }
        // alpha^2/sigma^2 = e  <=>  tan^2(pi t/2) = 1/e
        let t = (1.0f64 / std::f64::consts::E).sqrt().atan() / FRAC_PI_2;
        assert!((log_snr_at(t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_halving_is_exact() {
        for t in [1usize, 2, 7, 500, 1000] {
            let coarse = make_cosine_schedule(t).unwrap();
            let fine = make_cosine_schedule(2 * t).unwrap();
            for i in 0..=t {
                assert_eq!(coarse.alpha(i), fine.alpha(2 * i));
                assert_eq!(coarse.sigma(i), fine.sigma(2 * i));
            }
        }
    }

    #[test]
    fn beta_recursion_reproduces_alpha() {
        let s = make_cosine_schedule(100).unwrap();
        let mut prod = 1.0;
        for i in 1..=100 {
            let b = s.beta(i).unwrap();
            assert!((0.0..=1.0).contains(&b));
            prod *= 1.0 - b;
            assert!((prod.sqrt() - s.alpha(i)).abs() < 1e-12);
        }
        assert_eq!(s.beta(100).unwrap(), 1.0);
    }
}
