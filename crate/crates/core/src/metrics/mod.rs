//! Sample-quality metrics over embeddings and class probabilities:
//! Fréchet distance, Inception Score and squared MMD with an IMQ kernel.

mod extractor;

pub use extractor::{
    evaluate, tone_slices, Classifier, ClassifierConfig, ExtractorConfig, Features, Head, MetricsReport, StandInExtractor,
    ToneSet,
};
pub use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Kernel bandwidth `gamma^2` of the inverse multi-quadratic kernel.
pub const IMQ_GAMMA2: f64 = 8.0;
/// Relative size below which negative eigenvalues count as round-off.
const EIG_CLIP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fewer samples than needed for a full-rank covariance estimate.
    pub fn rank_deficient(&self) -> bool {
        self.n < self.dim() + 1
    }
}

/// Sample mean and unbiased covariance of the rows of `emb`.
pub fn fit_gaussian(emb: &DMatrix<f64>) -> Result<EmbeddingStats> {
    let (n, d) = emb.shape();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite embedding"));
    }
    let mean: Vec<f64> = (0..d).map(|j| emb.column(j).sum() / n as f64).collect();
    let mut centered = emb.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    // exact symmetry regardless of summation order
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let stats = EmbeddingStats { mean, cov, n };
    if stats.rank_deficient() {
        log::warn!("{n} samples for {d}-dimensional embeddings: covariance is rank deficient");
    }
    Ok(stats)
}

/// Eigenvalues of a symmetric matrix with round-off negatives set to zero.
fn clipped_eigen(m: DMatrix<f64>, what: &str) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = m.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut clipped = 0;
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIG_CLIP * max {
                return Err(Error::numeric(format!("{what} has eigenvalue {v:.3e} (max {max:.3e})")));
            }
            *v = 0.0;
            clipped += 1;
        }
    }
    if clipped > 0 {
        log::debug!("clipped {clipped} round-off negative eigenvalues of {what}");
    }
    Ok(eig)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::ShapeMismatch {
            expected: vec![d, d],
            actual: vec![b.dim(), b.cov.nrows()],
        });
    }
    let finite = |s: &EmbeddingStats| s.mean.iter().chain(s.cov.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::numeric("non-finite Gaussian statistics"));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let ea = clipped_eigen(a.cov.clone(), "first covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let mut inner = &sqrt_a * &b.cov * &sqrt_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let ei = clipped_eigen(inner, "covariance product")?;
    let cross: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Rows of conditional class probabilities `p(y|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(DMatrix<f64>);

impl ProbMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::invalid("empty probability matrix"));
        }
        for (i, row) in rows.row_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!("row {i} has a negative or NaN entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(ProbMatrix(rows))
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `exp(E_x KL(p(y|x) || p(y)))` with the marginal taken as the row mean.
pub fn inception_score(p: &ProbMatrix) -> f64 {
    let m = &p.0;
    let n = m.nrows() as f64;
    let marginal: Vec<f64> = (0..m.ncols()).map(|j| m.column(j).sum() / n).collect();
    let mean_kl = m
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    mean_kl.exp()
}

pub fn imq_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 / (1.0 + d2 / (2.0 * IMQ_GAMMA2))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Unbiased squared MMD between the rows of `x` and `y` under [`imq_kernel`].
pub fn mmd2_imq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(Error::invalid(format!("MMD needs at least 2 samples per side, got {m} and {n}")));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch { expected: vec![m, x.ncols()], actual: vec![n, y.ncols()] });
    }
    let (xs, ys) = (rows(x), rows(y));
    // k is symmetric: sum the upper triangle and double it
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += imq_kernel(&s[i], &s[j]);
            }
        }
        2.0 * acc
    };
    let kxx = within(&xs) / (m * (m - 1)) as f64;
    let kyy = within(&ys) / (n * (n - 1)) as f64;
    let kxy: f64 = xs.iter().map(|a| ys.iter().map(|b| imq_kernel(a, b)).sum::<f64>()).sum();
    Ok(kxx + kyy - 2.0 * kxy / (m * n) as f64)
}
