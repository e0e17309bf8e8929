//! Denoiser output parameterizations and reconstruction-loss weightings.
//!
//! Every parameterization maps a raw network output to an implied clean-data
//! estimate `x_hat` that is affine in the output:
//!
//! | kind   | x_hat                                   |
//! |--------|-----------------------------------------|
//! | `x`    | `out`                                   |
//! | `eps`  | `(z - sigma * out) / alpha`             |
//! | `v`    | `alpha * z - sigma * out`               |
//! | `xeps` | `sigma^2 * x_out + alpha * (z - sigma * eps_out)` |
//!
//! [`XPredMap`] holds those coefficients so training code can push the
//! x-space loss gradient back onto the raw output without re-deriving them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    X,
    Eps,
    /// Two output heads (`x` and `eps`) merged by SNR interpolation.
    XEps,
    V,
}

impl ParamKind {
    /// How many output tensors the network emits for this kind.
    pub fn output_multiplier(self) -> usize {
        match self {
            ParamKind::XEps => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::X => "x",
            ParamKind::Eps => "eps",
            ParamKind::XEps => "xeps",
            ParamKind::V => "v",
        }
    }
}

impl Default for ParamKind {
    fn default() -> Self {
        ParamKind::V
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(ParamKind::X),
            "eps" => Ok(ParamKind::Eps),
            "xeps" => Ok(ParamKind::XEps),
            "v" => Ok(ParamKind::V),
            other => Err(Error::invalid(format!("unknown parameterization `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightScheme {
    #[serde(rename = "snr")]
    Snr,
    #[serde(rename = "snr_trunc")]
    TruncatedSnr,
    #[serde(rename = "snr_plus_one")]
    SnrPlusOne,
}

impl WeightScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::Snr => "snr",
            WeightScheme::TruncatedSnr => "snr_trunc",
            WeightScheme::SnrPlusOne => "snr_plus_one",
        }
    }
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme::SnrPlusOne
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(WeightScheme::Snr),
            "snr_trunc" => Ok(WeightScheme::TruncatedSnr),
            "snr_plus_one" => Ok(WeightScheme::SnrPlusOne),
            other => Err(Error::invalid(format!("unknown weighting `{other}`"))),
        }
    }
}

/// `v = alpha * eps - sigma * x`
pub fn v_from(x: &Tensor, eps: &Tensor, alpha: f64, sigma: f64) -> Result<Tensor> {
    eps.lincomb(alpha, x, -sigma)
}

/// Coefficients of the affine map from a raw network output to `x_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XPredMap {
    pub z: f64,
    /// Coefficient on the (first) output head.
    pub out: f64,
    /// Coefficient on the epsilon head; zero unless the kind is `xeps`.
    pub eps_out: f64,
}

impl XPredMap {
    pub fn new(kind: ParamKind, alpha: f64, sigma: f64) -> Result<Self> {
        Ok(match kind {
            ParamKind::X => XPredMap {
                z: 0.0,
                out: 1.0,
                eps_out: 0.0,
            },
            ParamKind::Eps => {
                if alpha == 0.0 {
                    return Err(Error::SingularParameterization(
                        "epsilon prediction carries no information about x at alpha = 0".into(),
                    ));
                }
                XPredMap {
                    z: 1.0 / alpha,
                    out: -sigma / alpha,
                    eps_out: 0.0,
                }
            }
            ParamKind::V => XPredMap {
                z: alpha,
                out: -sigma,
                eps_out: 0.0,
            },
            ParamKind::XEps => XPredMap {
                z: alpha,
                out: sigma * sigma,
                eps_out: -alpha * sigma,
            },
        })
    }

    /// Apply to one example: `z` has `n` values, `out` has `n` (or `2n` for
    /// `xeps`, x head first).
    pub fn apply_into(&self, out: &[f64], z: &[f64], dst: &mut [f64]) {
        let n = z.len();
        if out.len() == 2 * n {
            let (xo, eo) = out.split_at(n);
            for k in 0..n {
                dst[k] = self.z * z[k] + self.out * xo[k] + self.eps_out * eo[k];
            }
        } else {
            for k in 0..n {
                dst[k] = self.z * z[k] + self.out * out[k];
            }
        }
    }
}

/// Implied clean-data prediction for a batch at a single `(alpha, sigma)`.
///
/// `z` is `[batch, ...]`; `out` matches it, except for `xeps` where axis 1 is
/// doubled (x head channels first, then epsilon head channels).
pub fn to_x_prediction(
    out: &Tensor,
    kind: ParamKind,
    z: &Tensor,
    alpha: f64,
    sigma: f64,
) -> Result<Tensor> {
    to_x_prediction_per_item(out, kind, z, &vec![(alpha, sigma); z.batch()])
}

/// Like [`to_x_prediction`] with per-item `(alpha, sigma)` pairs.
pub fn to_x_prediction_per_item(
    out: &Tensor,
    kind: ParamKind,
    z: &Tensor,
    coeffs: &[(f64, f64)],
) -> Result<Tensor> {
    check_output_shape(out, kind, z)?;
    if coeffs.len() != z.batch() {
        return Err(Error::invalid(format!(
            "{} coefficient pairs for batch of {}",
            coeffs.len(),
            z.batch()
        )));
    }
    let mut x = Tensor::zeros(z.shape());
    for (b, &(a, s)) in coeffs.iter().enumerate() {
        let map = XPredMap::new(kind, a, s)?;
        map.apply_into(out.item(b), z.item(b), x.item_mut(b));
    }
    Ok(x)
}

/// Per-item `(alpha, sigma)` for fractional times.
pub fn coeffs_at(times: &[f64]) -> Vec<(f64, f64)> {
    times.iter().map(|&t| schedule::alpha_sigma(t)).collect()
}

pub fn check_output_shape(out: &Tensor, kind: ParamKind, z: &Tensor) -> Result<()> {
    let mut expected = z.shape().to_vec();
    if kind == ParamKind::XEps {
        if expected.len() < 2 {
            return Err(Error::invalid("xeps outputs need a channel axis"));
        }
        expected[1] *= 2;
    }
    out.ensure_shape(&expected)
}

/// Reconstruction-loss weight `w(lambda)` in x-space.
///
/// `lambda = -inf` (zero SNR) is finite for every scheme; plain SNR weighting
/// gives it zero weight.
pub fn loss_weight(lambda: f64, scheme: WeightScheme) -> f64 {
    let snr = lambda.exp();
    match scheme {
        WeightScheme::Snr => snr,
        WeightScheme::TruncatedSnr => snr.max(1.0),
        WeightScheme::SnrPlusOne => snr + 1.0,
    }
}

/// `w(lambda_t)` at fractional time `t`, with `t = 1` mapped to `lambda = -inf`.
pub fn loss_weight_at(t: f64, scheme: WeightScheme) -> f64 {
    let lambda = if t >= 1.0 {
        f64::NEG_INFINITY
    } else if t <= 0.0 {
        f64::INFINITY
    } else {
        let (a, s) = schedule::alpha_sigma(t);
        2.0 * (a / s).ln()
    };
    loss_weight(lambda, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_pair(seed: u64, shape: &[usize]) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(shape, &mut rng), Tensor::randn(shape, &mut rng))
    }

    #[test]
    fn v_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (_, eps) = rand_pair(1, &[2, 3]);
        let v = v_from(&Tensor::zeros(&[2, 3]), &eps, h, h).unwrap();
        assert_eq!(v, eps.scale(h));

        let (x, _) = rand_pair(2, &[2, 3]);
        let v = v_from(&x, &Tensor::zeros(&[2, 3]), 0.0, 1.0).unwrap();
        assert_eq!(v, x.scale(-1.0));

        let (x, eps) = rand_pair(3, &[4, 5]);
        let v = v_from(&x, &eps, 0.8, 0.6).unwrap();
        for k in 0..x.len() {
            assert_eq!(v.data()[k], 0.8 * eps.data()[k] - 0.6 * x.data()[k]);
        }

        assert!(v_from(&x, &Tensor::zeros(&[4, 4]), 0.8, 0.6).is_err());
    }

    #[test]
    fn each_kind_recovers_x_from_consistent_output() {
        let (x, eps) = rand_pair(4, &[3, 2, 4]);
        let (a, s) = (0.6, 0.8);
        let z = x.lincomb(a, &eps, s).unwrap();

        let xv = to_x_prediction(&v_from(&x, &eps, a, s).unwrap(), ParamKind::V, &z, a, s).unwrap();
        let xe = to_x_prediction(&eps, ParamKind::Eps, &z, a, s).unwrap();
        let xx = to_x_prediction(&x, ParamKind::X, &z, a, s).unwrap();
        let mut both = Vec::new();
        for b in 0..3 {
            both.extend_from_slice(x.item(b));
            both.extend_from_slice(eps.item(b));
        }
        let both = Tensor::from_vec(&[3, 4, 4], both).unwrap();
        let xm = to_x_prediction(&both, ParamKind::XEps, &z, a, s).unwrap();
        for got in [xv, xe, xx, xm] {
            for (g, w) in got.data().iter().zip(x.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eps_is_singular_at_zero_alpha() {
        let z = Tensor::zeros(&[1, 2]);
        let r = to_x_prediction(&z, ParamKind::Eps, &z, 0.0, 1.0);
        assert!(matches!(r, Err(Error::SingularParameterization(_))));
        // the other kinds stay well defined
        for kind in [ParamKind::X, ParamKind::V] {
            assert!(to_x_prediction(&z, kind, &z, 0.0, 1.0).is_ok());
        }
    }

    #[test]
    fn xeps_rejects_single_head() {
        let z = Tensor::zeros(&[1, 2, 3]);
        assert!(to_x_prediction(&z, ParamKind::XEps, &z, 0.5, 0.5).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = |l| {
            (
                loss_weight(l, WeightScheme::Snr),
                loss_weight(l, WeightScheme::TruncatedSnr),
                loss_weight(l, WeightScheme::SnrPlusOne),
            )
        };
        assert_eq!(w(0.0), (1.0, 1.0, 2.0));
        assert_eq!(w(f64::NEG_INFINITY), (0.0, 1.0, 1.0));
        let (a, b, c) = w(3.0f64.ln());
        assert!((a - 3.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12 && (c - 4.0).abs() < 1e-12);
        assert_eq!(loss_weight_at(1.0, WeightScheme::Snr), 0.0);
        assert_eq!(loss_weight_at(1.0, WeightScheme::SnrPlusOne), 1.0);
    }

    #[test]
    fn names_round_trip() {
        for k in [ParamKind::X, ParamKind::Eps, ParamKind::XEps, ParamKind::V] {
            assert_eq!(k.as_str().parse::<ParamKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        for w in [WeightScheme::Snr, WeightScheme::TruncatedSnr, WeightScheme::SnrPlusOne] {
            assert_eq!(w.as_str().parse::<WeightScheme>().unwrap(), w);
            assert_eq!(serde_json::to_string(&w).unwrap(), format!("\"{w}\""));
        }
    }
}
