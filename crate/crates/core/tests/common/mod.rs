#![allow(dead_code)]

use pdd_core::nn::ParamStore;
use pdd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative disagreement between `analytic` gradients and central
/// differences of `f` with step `h`, probing up to `per_tensor` entries of
/// every parameter.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-4 * max|g|)` over the
/// tensor, so entries far below the tensor's gradient scale (where central
/// differences only measure round-off) are judged on the tensor's scale.
pub fn max_fd_error<F>(params: &ParamStore, analytic: &ParamStore, f: F, h: f64, per_tensor: usize) -> (f64, String)
where
    F: Fn(&ParamStore) -> f64,
{
    let mut pick = rng(12345);
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (name, p) in params {
        let g = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for `{name}`"));
        assert_eq!(g.shape(), p.shape(), "gradient shape for `{name}`");
        let floor = 1e-4 * g.max_abs();
        let idx: Vec<usize> = if p.len() <= per_tensor {
            (0..p.len()).collect()
        } else {
            (0..per_tensor).map(|_| pick.random_range(0..p.len())).collect()
        };
        for i in idx {
            let orig = p.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let fp = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let fm = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.data()[i];
            let scale = fd.abs().max(an.abs()).max(floor);
            let err = if scale < 1e-7 { (fd - an).abs() } else { (fd - an).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {an:.8e} vs numeric {fd:.8e}"));
            }
        }
    }
    worst
}

/// Replace every parameter with `N(0, scale^2)` draws.
pub fn randomize(params: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for t in params.values_mut() {
        let fresh = Tensor::randn(t.shape(), &mut r).scale(scale);
        *t = fresh;
    }
}

/// Gaussian seed so that the scalar probe `sum(out * seed)` touches every output.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
