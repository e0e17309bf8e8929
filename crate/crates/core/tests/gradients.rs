mod common;

use common::{dot, max_fd_error, probe_weights, randomize, rng};
use pdd_core::denoiser::{DenoiserModel, Trainable, UNetConfig};
use pdd_core::diffusion::Denoiser;
use pdd_core::nn::{Graph, ParamStore, Var};
use pdd_core::param::{ParamKind, WeightScheme};
use pdd_core::schedule::ScheduleSpec;
use pdd_core::{Result, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    entries
        .iter()
        .map(|(n, s)| (n.to_string(), Tensor::randn(s, &mut r)))
        .collect()
}

/// Check one graph construction: every named tensor is a parameter, the
/// scalar is `sum(out * R)` for a fixed random `R`.
fn check_op<F>(params: ParamStore, build: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, &params).unwrap();
    let r = probe_weights(g.value(out).shape(), 99);
    let grads = g.backward(out, r.clone()).unwrap();
    let f = |p: &ParamStore| {
        let mut g = Graph::new();
        let out = build(&mut g, p).unwrap();
        dot(g.value(out), &r)
    };
    let (err, at) = max_fd_error(&params, &grads, f, H, 64);
    assert!(err < TOL, "relative error {err:.3e} at {at}");
}

fn p(g: &mut Graph, s: &ParamStore, n: &str) -> Var {
    g.param(s, n).unwrap()
}

#[test]
fn conv1d_gradients() {
    for (k, pad) in [(1, 0), (3, 1), (3, 0), (5, 2)] {
        let s = store(&[("x", &[2, 3, 7]), ("w", &[4, 3, k]), ("b", &[4])], k as u64);
        check_op(s, |g, s| {
            let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
            g.conv1d(x, w, b, pad)
        });
    }
}

#[test]
fn conv_transpose_gradients() {
    let s = store(&[("x", &[2, 3, 5]), ("w", &[3, 4, 2]), ("b", &[4])], 1);
    check_op(s, |g, s| {
        let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
        g.conv_transpose2(x, w, b)
    });
}

#[test]
fn batch_norm_train_gradients() {
    let s = store(&[("x", &[3, 2, 5]), ("gamma", &[2]), ("beta", &[2])], 2);
    check_op(s, |g, s| {
        let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
        g.batch_norm(x, ga, be, "bn", None)
    });
}

#[test]
fn batch_norm_eval_gradients() {
    let s = store(&[("x", &[3, 2, 5]), ("gamma", &[2]), ("beta", &[2])], 3);
    check_op(s, |g, s| {
        let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
        g.batch_norm(x, ga, be, "bn", Some((&[0.3, -0.2], &[1.5, 0.7])))
    });
}

#[test]
fn relu_gradients() {
    let s = store(&[("x", &[2, 3, 6])], 4);
    check_op(s, |g, s| {
        let x = p(g, s, "x");
        Ok(g.relu(x))
    });
}

#[test]
fn max_pool_gradients() {
    let s = store(&[("x", &[2, 3, 8])], 5);
    check_op(s, |g, s| {
        let x = p(g, s, "x");
        g.max_pool2(x)
    });
}

#[test]
fn add_concat_add_channel_gradients() {
    let s = store(&[("a", &[2, 3, 4]), ("b", &[2, 3, 4]), ("c", &[2, 2, 4]), ("v", &[2, 5])], 6);
    check_op(s, |g, s| {
        let (a, b, c, v) = (p(g, s, "a"), p(g, s, "b"), p(g, s, "c"), p(g, s, "v"));
        let ab = g.add(a, b)?;
        let cat = g.concat(ab, c)?;
        g.add_channel(cat, v)
    });
}

#[test]
fn scale_channel_gradients() {
    let s = store(&[("x", &[2, 3, 4]), ("s", &[2, 3])], 11);
    check_op(s, |g, s| {
        let (x, k) = (p(g, s, "x"), p(g, s, "s"));
        g.scale_channel(x, k)
    });
}

#[test]
fn floor_mixture_gradients() {
    let coeffs = [(0.8, 0.6), (0.1, 0.995), (0.995, 0.0998), (0.0, 1.0)];
    let s = store(&[("z", &[4, 3, 5]), ("mu", &[4, 3]), ("rho", &[4, 3]), ("logit", &[4, 3])], 12);
    check_op(s, |g, s| {
        let (z, mu, rho, logit) = (p(g, s, "z"), p(g, s, "mu"), p(g, s, "rho"), p(g, s, "logit"));
        g.floor_mixture(z, mu, rho, logit, &coeffs, -1.0)
    });
}

#[test]
fn item_lincomb_gradients() {
    let s = store(&[("a", &[2, 3, 4]), ("b", &[2, 3, 4])], 13);
    check_op(s, |g, s| {
        let (a, b) = (p(g, s, "a"), p(g, s, "b"));
        g.item_lincomb(a, b, &[0.5, -2.0], &[1.5, 0.25])
    });
}

#[test]
fn linear_gradients() {
    let s = store(&[("x", &[3, 4]), ("w", &[5, 4]), ("b", &[5])], 7);
    check_op(s, |g, s| {
        let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
        g.linear(x, w, b)
    });
}

#[test]
fn attention_gradients() {
    let s = store(&[("q", &[2, 3, 5]), ("k", &[2, 3, 5]), ("v", &[2, 3, 5])], 8);
    check_op(s, |g, s| {
        let (q, k, v) = (p(g, s, "q"), p(g, s, "k"), p(g, s, "v"));
        g.attention(q, k, v)
    });
}

#[test]
fn mean_time_and_reshape_gradients() {
    let s = store(&[("x", &[2, 3, 4])], 9);
    check_op(s, |g, s| {
        let x = p(g, s, "x");
        let m = g.mean_time(x)?;
        g.reshape(m, &[6])
    });
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let s = store(&[("x", &[2, 3, 4])], 10);
    check_op(s, |g, s| {
        let x1 = p(g, s, "x");
        let x2 = p(g, s, "x");
        let y = g.relu(x1);
        g.add(y, x2)
    });
}

fn small_unet(kind: ParamKind) -> DenoiserModel {
    let cfg = UNetConfig {
        packed_channels: 3,
        mel_bins: 2,
        frames: 16,
        base_width: 4,
        depth: 2,
        kernel_size: 3,
        time_embed_dim: 8,
        use_attention: vec![true, false, true],
    };
    let mut m = DenoiserModel::new(cfg, kind, ScheduleSpec::default(), &mut rng(0)).unwrap();
    randomize(&mut m.params, 0.5, 1);
    m
}

fn check_unet_loss(kind: ParamKind, weighting: WeightScheme, eval: bool) {
    let m = small_unet(kind);
    let mut r = rng(2);
    let z = Tensor::randn(&[3, 3, 2, 16], &mut r);
    let t = [0.15, 0.5, 0.85];
    // targets near the prediction keep the loss small, so central
    // differences stay well above round-off
    let near = m.predict_x(&z, &t).unwrap();
    let target = near.zip_map(&Tensor::randn(&[3, 3, 2, 16], &mut r), |a, b| a + 0.1 * b).unwrap();
    let loss = |mm: &DenoiserModel| {
        if eval {
            mm.loss_and_grad_eval(&z, &t, &target, weighting)
        } else {
            mm.loss_and_grad_z(&z, &t, &target, weighting)
        }
    };
    let lg = loss(&m).unwrap();
    let f = |ps: &ParamStore| {
        let mut mm = m.clone();
        mm.params = ps.clone();
        loss(&mm).unwrap().loss
    };
    let (err, at) = max_fd_error(&m.params, &lg.grads, f, H, 6);
    assert!(err < TOL, "{kind}/{weighting:?}: relative error {err:.3e} at {at}");
}

#[test]
fn unet_gradients_every_parameterization() {
    for kind in [ParamKind::X, ParamKind::Eps, ParamKind::XEps, ParamKind::V] {
        check_unet_loss(kind, WeightScheme::SnrPlusOne, false);
    }
}

#[test]
fn unet_gradients_inference_mode_and_weightings() {
    check_unet_loss(ParamKind::V, WeightScheme::TruncatedSnr, true);
    check_unet_loss(ParamKind::Eps, WeightScheme::Snr, false);
}

#[test]
fn unet_input_independence_across_batch() {
    // In inference mode each item's output depends only on that item.
    let m = small_unet(ParamKind::V);
    let mut r = rng(3);
    let z = Tensor::randn(&[2, 3, 2, 16], &mut r);
    let out = m.forward(&z, &[0.3, 0.6]).unwrap();
    let mut z2 = z.clone();
    z2.item_mut(1).iter_mut().for_each(|v| *v += 1.0);
    let out2 = m.forward(&z2, &[0.3, 0.6]).unwrap();
    assert_eq!(out.item(0), out2.item(0));
    assert_ne!(out.item(1), out2.item(1));
}


