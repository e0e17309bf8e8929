use pdd_core::audio::{self, LongMel, NormStats, LONG_FRAMES, MEL_BINS};
use pdd_core::diffusion::{self, Denoiser, LatentState};
use pdd_core::distill::distill_target;
use pdd_core::metrics::{frechet_distance, imq_kernel, inception_score, mmd2_imq, DMatrix, EmbeddingStats, ProbMatrix};
use pdd_core::param::{self, ParamKind};
use pdd_core::schedule::{self, make_cosine_schedule};
use pdd_core::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Oracle(Tensor);

impl Denoiser for Oracle {
    fn predict_x(&self, _z: &Tensor, _t: &[f64]) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

proptest! {
    #[test]
    fn schedule_is_variance_preserving_and_monotone(steps in 1usize..3000) {
        let s = make_cosine_schedule(steps).unwrap();
        for i in 0..=steps {
            prop_assert!((s.alpha(i).powi(2) + s.sigma(i).powi(2) - 1.0).abs() < 1e-12);
            if i > 0 {
                prop_assert!(s.alpha(i) < s.alpha(i - 1));
                prop_assert!(s.sigma(i) > s.sigma(i - 1));
            }
        }
        prop_assert_eq!(s.alpha(steps), 0.0);
        let lambdas: Vec<f64> = (1..steps).map(|i| s.log_snr(i).unwrap()).collect();
        prop_assert!(lambdas.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn halving_the_grid_is_exact(steps in 1usize..2000) {
        let fine = make_cosine_schedule(2 * steps).unwrap();
        let coarse = make_cosine_schedule(steps).unwrap();
        for i in 0..=steps {
            prop_assert_eq!(fine.alpha(2 * i), coarse.alpha(i));
            prop_assert_eq!(fine.sigma(2 * i), coarse.sigma(i));
        }
    }

    #[test]
    fn every_parameterization_round_trips(seed in any::<u64>(), t in 0.001f64..0.999) {
        let x = randn(&[2, 3, 5], seed);
        let eps = randn(&[2, 3, 5], seed ^ 1);
        let (a, s) = schedule::alpha_sigma(t);
        let z = x.lincomb(a, &eps, s).unwrap();
        let scale = x.max_abs();
        let v = param::v_from(&x, &eps, a, s).unwrap();
        let from_v = param::to_x_prediction(&v, ParamKind::V, &z, a, s).unwrap();
        prop_assert!(max_abs_diff(&from_v, &x) <= 1e-6 * scale);
        let from_eps = param::to_x_prediction(&eps, ParamKind::Eps, &z, a, s).unwrap();
        prop_assert!(max_abs_diff(&from_eps, &x) <= 1e-6 * scale);
        // the x head fills the first half of the channel axis per item
        let mut heads = Vec::new();
        for b in 0..2 {
            heads.extend_from_slice(x.item(b));
            heads.extend_from_slice(eps.item(b));
        }
        let xeps = Tensor::from_vec(&[2, 6, 5], heads).unwrap();
        let from_xeps = param::to_x_prediction(&xeps, ParamKind::XEps, &z, a, s).unwrap();
        prop_assert!(max_abs_diff(&from_xeps, &x) <= 1e-6 * scale);
    }

    #[test]
    fn eps_and_x_losses_agree_under_snr(seed in any::<u64>(), t in 0.001f64..0.999) {
        let x = randn(&[1, 16], seed);
        let eps = randn(&[1, 16], seed ^ 1);
        let eps_hat = randn(&[1, 16], seed ^ 2);
        let (a, s) = schedule::alpha_sigma(t);
        let z = x.lincomb(a, &eps, s).unwrap();
        let x_hat = param::to_x_prediction(&eps_hat, ParamKind::Eps, &z, a, s).unwrap();
        let lhs = eps.lincomb(1.0, &eps_hat, -1.0).unwrap().sum_sq();
        let rhs = a * a / (s * s) * x.lincomb(1.0, &x_hat, -1.0).unwrap().sum_sq();
        prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs);
    }

    #[test]
    fn perfect_teacher_is_a_fixed_point(seed in any::<u64>(), log_n in 1u32..10, frac in 0.0f64..1.0) {
        let n = 1usize << log_n;
        let i = 1 + ((frac * n as f64) as usize).min(n - 1);
        let x = randn(&[2, 4], seed);
        let eps = randn(&[2, 4], seed ^ 7);
        let state = diffusion::q_sample(&x, i as f64 / n as f64, &eps).unwrap();
        let target = distill_target(&Oracle(x.clone()), &state, n).unwrap();
        prop_assert!(max_abs_diff(&target, &x) <= 1e-6 * x.max_abs());
    }

    #[test]
    fn ddim_stays_on_the_straight_path(seed in any::<u64>(), t in 0.01f64..1.0, frac in 0.0f64..1.0) {
        let x = randn(&[3, 4], seed);
        let eps = randn(&[3, 4], seed ^ 3);
        let state = diffusion::q_sample(&x, t, &eps).unwrap();
        let next = diffusion::ddim_step(&state, &x, t * frac).unwrap();
        let want = diffusion::q_sample(&x, t * frac, &eps).unwrap();
        prop_assert!(max_abs_diff(&next.z, &want.z) <= 1e-12 * (1.0 + x.max_abs() + eps.max_abs()));
    }

    #[test]
    fn student_grid_is_a_subset_of_the_teacher_grid(log_n in 1u32..12) {
        let n = 1usize << log_n;
        for i in 1..=n / 2 {
            let t = i as f64 / (n / 2) as f64;
            prop_assert_eq!(t, (2 * i) as f64 / n as f64);
        }
    }

    #[test]
    fn packing_is_bijective(seed in any::<u64>()) {
        let data = randn(&[1, MEL_BINS, LONG_FRAMES], seed).map(|v| v.tanh());
        let m = LongMel::new(data, NormStats::default()).unwrap();
        let s = audio::pack(&m).unwrap();
        prop_assert_eq!(&audio::unpack(&s).unwrap(), &m);
        prop_assert_eq!(audio::pack(&audio::unpack(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn normalization_inverts_above_the_floor(lo in -120.0f64..-20.0, span in 1.0f64..100.0, u in 0.0f64..1.0) {
        let n = NormStats::from_range(-200.0, lo, lo + span).unwrap();
        let db = lo + u * span;
        prop_assert!((n.denormalize(n.normalize(db)) - db).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&n.normalize(db)));
    }

    #[test]
    fn frechet_distance_is_symmetric(seed in any::<u64>(), d in 1usize..6) {
        let stats = |s: u64| {
            let a = randn(&[d, d], s);
            let m = DMatrix::from_row_slice(d, d, a.data());
            EmbeddingStats { mean: randn(&[d], s ^ 9).into_data(), cov: &m * m.transpose(), n: 50 }
        };
        let (a, b) = (stats(seed), stats(seed ^ 0x55));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
    }

    #[test]
    fn inception_score_ignores_row_order_and_is_bounded(seed in any::<u64>(), n in 2usize..20, c in 2usize..8) {
        let logits = randn(&[n, c], seed).scale(3.0);
        let mut rows = DMatrix::from_row_slice(n, c, logits.data()).map(f64::exp);
        for mut r in rows.row_iter_mut() {
            let s = r.sum();
            r /= s;
        }
        let rev = DMatrix::from_fn(n, c, |i, j| rows[(n - 1 - i, j)]);
        let is = inception_score(&ProbMatrix::new(rows).unwrap());
        let is_rev = inception_score(&ProbMatrix::new(rev).unwrap());
        prop_assert!((is - is_rev).abs() < 1e-12);
        prop_assert!(is >= 1.0 - 1e-12 && is <= c as f64 + 1e-12);
    }

    #[test]
    fn mmd_matches_naive_sums_and_ignores_order(seed in any::<u64>(), m in 2usize..6, n in 2usize..6, d in 1usize..4) {
        let x = DMatrix::from_row_slice(m, d, randn(&[m, d], seed).scale(2.0).data());
        let y = DMatrix::from_row_slice(n, d, randn(&[n, d], seed ^ 4).data());
        let row = |a: &DMatrix<f64>, i: usize| a.row(i).iter().copied().collect::<Vec<f64>>();
        let mut naive = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    naive += imq_kernel(&row(&x, i), &row(&x, j)) / (m * (m - 1)) as f64;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    naive += imq_kernel(&row(&y, i), &row(&y, j)) / (n * (n - 1)) as f64;
                }
            }
        }
        for i in 0..m {
            for j in 0..n {
                naive -= 2.0 * imq_kernel(&row(&x, i), &row(&y, j)) / (m * n) as f64;
            }
        }
        let got = mmd2_imq(&x, &y).unwrap();
        prop_assert!((got - naive).abs() < 1e-12);
        let shuffled = DMatrix::from_fn(m, d, |i, j| x[((i + 1) % m, j)]);
        prop_assert!((mmd2_imq(&shuffled, &y).unwrap() - got).abs() < 1e-12);
    }
}

#[test]
fn q_sample_keeps_unit_variance_at_every_time() {
    let n = 20_000;
    let x = randn(&[1, n], 1);
    let eps = randn(&[1, n], 2);
    for k in 0..=10 {
        let z = diffusion::q_sample(&x, k as f64 / 10.0, &eps).unwrap().z;
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 3.0 / (n as f64).sqrt(), "t={}: var {var}", k as f64 / 10.0);
    }
}

#[test]
fn latent_state_rejects_times_outside_unit_interval() {
    assert!(LatentState::new(Tensor::zeros(&[1, 1]), 1.5).is_err());
    assert!(LatentState::new(Tensor::zeros(&[1, 1]), -0.1).is_err());
}
