mod common;

use common::{randomize, rng};
use pdd_core::denoiser::{train, weighted_x_loss, DenoiserModel, TrainConfig, UNetConfig};
use pdd_core::param::{loss_weight_at, ParamKind, WeightScheme};
use pdd_core::schedule::{self, ScheduleSpec};
use pdd_core::{Dataset, Tensor};

fn config(depth: usize, frames: usize) -> UNetConfig {
    UNetConfig {
        packed_channels: 3,
        mel_bins: 4,
        frames,
        base_width: 4,
        depth,
        kernel_size: 3,
        time_embed_dim: 8,
        use_attention: vec![false; depth + 1],
    }
}

fn random_model(cfg: UNetConfig, kind: ParamKind) -> DenoiserModel {
    let mut m = DenoiserModel::new(cfg, kind, ScheduleSpec::default(), &mut rng(0)).unwrap();
    randomize(&mut m.params, 0.3, 1);
    m
}

/// Output frames that can depend on input frame `p`, from the layer list:
/// each ResBlock widens by two kernel radii, pooling halves, the 2x
/// transposed conv doubles, and the decoder concat unions with the skip.
fn receptive_interval(cfg: &UNetConfig, p: usize) -> (usize, usize) {
    let r = cfg.kernel_size / 2;
    let widen = |(lo, hi): (usize, usize), len: usize| (lo.saturating_sub(2 * r), (hi + 2 * r).min(len - 1));
    let mut iv = (p, p);
    let mut skips = Vec::new();
    for l in 0..cfg.depth {
        iv = widen(iv, cfg.frames >> l);
        skips.push(iv);
        iv = (iv.0 / 2, iv.1 / 2);
    }
    iv = widen(iv, cfg.frames >> cfg.depth);
    for l in (0..cfg.depth).rev() {
        let up = (2 * iv.0, 2 * iv.1 + 1);
        let s = skips[l];
        iv = widen((up.0.min(s.0), up.1.max(s.1)), cfg.frames >> l);
    }
    iv
}

#[test]
fn perturbation_stays_inside_receptive_field() {
    for depth in [1, 2] {
        let cfg = config(depth, 64);
        let m = random_model(cfg.clone(), ParamKind::V);
        let z = Tensor::randn(&[1, 3, 4, 64], &mut rng(2));
        let base = m.forward(&z, &[0.4]).unwrap();
        let p = 30;
        let mut bumped = z.clone();
        for c in 0..12 {
            bumped.data_mut()[c * 64 + p] += 0.5;
        }
        let out = m.forward(&bumped, &[0.4]).unwrap();
        let (lo, hi) = receptive_interval(&cfg, p);
        let mut changed = vec![false; 64];
        for c in 0..12 {
            for f in 0..64 {
                changed[f] |= base.data()[c * 64 + f] != out.data()[c * 64 + f];
            }
        }
        for (f, &ch) in changed.iter().enumerate() {
            assert!(!ch || (lo..=hi).contains(&f), "depth {depth}: frame {f} outside [{lo}, {hi}] changed");
        }
        assert!(changed[lo] && changed[hi], "depth {depth}: receptive field [{lo}, {hi}] is not tight");
    }
}

#[test]
fn output_shape_matches_input_for_each_depth() {
    for depth in 1..=3 {
        for kind in [ParamKind::V, ParamKind::XEps] {
            let m = random_model(config(depth, 128), kind);
            let z = Tensor::randn(&[2, 3, 4, 128], &mut rng(3));
            let out = m.forward(&z, &[0.2, 0.7]).unwrap();
            let channels = 3 * kind.output_multiplier();
            assert_eq!(out.shape(), &[2, channels, 4, 128], "depth {depth} {kind}");
        }
    }
}

#[test]
fn identical_items_give_identical_outputs() {
    let m = random_model(config(2, 32), ParamKind::V);
    let one = Tensor::randn(&[1, 3, 4, 32], &mut rng(4));
    let two = Tensor::stack(&[&one.item_tensor(0), &one.item_tensor(0)]).unwrap();
    let out = m.forward(&two, &[0.6, 0.6]).unwrap();
    assert_eq!(out.item(0), out.item(1));
    assert_eq!(out.item(0), m.forward(&one, &[0.6]).unwrap().item(0));
}

#[test]
fn zero_training_steps_return_the_model_unchanged() {
    let m = random_model(config(1, 16), ParamKind::V);
    let data = Dataset::new(vec![Tensor::randn(&[3, 4, 16], &mut rng(5))]).unwrap();
    let cfg = TrainConfig { steps: 0, ..Default::default() };
    let (out, log) = train(m.clone(), &data, &ScheduleSpec::default().build().unwrap(), &cfg).unwrap();
    assert_eq!(out, m);
    assert!(log.records.is_empty());
}

#[test]
fn scalar_model_gradient_matches_hand_derivation() {
    // out = theta * z; x_hat = a_z z + a_out out, so
    // dL/dtheta = 2 w / n * sum (x_hat - x) * a_out * z
    let mut r = rng(6);
    let z = Tensor::randn(&[1, 10], &mut r);
    let x = Tensor::randn(&[1, 10], &mut r);
    let theta = 0.37;
    let t = 0.3;
    let (a, s) = schedule::alpha_sigma(t);
    for (kind, a_z, a_out) in [(ParamKind::X, 0.0, 1.0), (ParamKind::V, a, -s), (ParamKind::Eps, 1.0 / a, -s / a)] {
        let out = z.scale(theta);
        let (loss, seed) = weighted_x_loss(&out, kind, &z, &[t], &x, WeightScheme::SnrPlusOne).unwrap();
        let grad: f64 = seed.data().iter().zip(z.data()).map(|(g, zv)| g * zv).sum();
        let w = loss_weight_at(t, WeightScheme::SnrPlusOne);
        let resid: Vec<f64> = z.data().iter().zip(x.data()).map(|(&zv, &xv)| (a_z + a_out * theta) * zv - xv).collect();
        let want_loss = w * resid.iter().map(|d| d * d).sum::<f64>() / 10.0;
        let want_grad = 2.0 * w / 10.0 * resid.iter().zip(z.data()).map(|(d, zv)| d * a_out * zv).sum::<f64>();
        assert!((loss - want_loss).abs() < 1e-12 * want_loss.max(1.0), "{kind}");
        assert!((grad - want_grad).abs() < 1e-12 * want_grad.abs().max(1.0), "{kind}");
    }
}

#[test]
fn inference_forward_is_pure() {
    let m = random_model(config(2, 32), ParamKind::V);
    let z = Tensor::randn(&[3, 3, 4, 32], &mut rng(7));
    let t = [0.1, 0.5, 0.9];
    assert_eq!(m.forward(&z, &t).unwrap(), m.forward(&z, &t).unwrap());
}
