use pdd_core::metrics::{fit_gaussian, frechet_distance, mmd2_imq, DMatrix};
use pdd_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normal_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let t = Tensor::randn(&[n, d], &mut ChaCha8Rng::seed_from_u64(seed));
    DMatrix::from_row_slice(n, d, t.data())
}

#[test]
fn gaussian_fit_recovers_standard_normal() {
    let s = fit_gaussian(&normal_matrix(10_000, 3, 1)).unwrap();
    assert_eq!(s.n, 10_000);
    assert!(!s.rank_deficient());
    for i in 0..3 {
        assert!(s.mean[i].abs() < 0.05, "mean {i}: {}", s.mean[i]);
        assert!((s.cov[(i, i)] - 1.0).abs() < 0.05, "var {i}: {}", s.cov[(i, i)]);
    }
    assert_eq!(s.cov, s.cov.transpose());
}

#[test]
fn small_samples_are_flagged_rank_deficient() {
    assert!(fit_gaussian(&normal_matrix(3, 5, 2)).unwrap().rank_deficient());
}

#[test]
fn same_distribution_mmd_is_small_and_not_significant() {
    let x = normal_matrix(500, 4, 3);
    let y = normal_matrix(500, 4, 4);
    let observed = mmd2_imq(&x, &y).unwrap();
    assert!(observed.abs() < 0.01, "MMD^2 {observed}");
    // permutation baseline: relabelling the pooled sample gives the null spread
    let pooled: Vec<Vec<f64>> = x.row_iter().chain(y.row_iter()).map(|r| r.iter().copied().collect()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut idx: Vec<usize> = (0..1000).collect();
    let mut above = 0;
    let perms = 20;
    for _ in 0..perms {
        idx.shuffle(&mut r);
        let take = |range: &[usize]| DMatrix::from_fn(500, 4, |i, j| pooled[range[i]][j]);
        let null = mmd2_imq(&take(&idx[..500]), &take(&idx[500..])).unwrap();
        above += usize::from(null >= observed);
    }
    assert!(above >= 1, "observed {observed} exceeds every permutation");
}

#[test]
fn shifted_distribution_mmd_is_clearly_positive() {
    let x = normal_matrix(300, 4, 6);
    let y = normal_matrix(300, 4, 7).add_scalar(1.0);
    assert!(mmd2_imq(&x, &y).unwrap() > 0.05);
}

#[test]
fn frechet_distance_of_fitted_sets() {
    let a = fit_gaussian(&normal_matrix(2000, 3, 8)).unwrap();
    let b = fit_gaussian(&normal_matrix(2000, 3, 9).add_scalar(2.0)).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    // mean shift of 2 per axis dominates
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 12.0).abs() < 0.5, "{d}");
}
