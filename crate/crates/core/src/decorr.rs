//! Decorrelation regularizer over a batch of latent codes.
//!
//! The loss pushes every pairwise Pearson correlation towards zero and every
//! per-dimension variance towards a common value:
//!
//! ```text
//! L = -sum_{i != j} log(1 - |rho_ij|) + sum_i (Var[w_i] - c)^2
//! ```
//!
//! where `c` is the mean of the variances ([`VarianceTerm::Mean`], default)
//! or their plain sum ([`VarianceTerm::Sum`]). The pair sum runs over ordered
//! pairs, so every unordered pair is counted twice.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{centered, correlation_from_cov, covariance_of_centered, LatentBatch};

/// |rho| is clamped to at most `1 - CLAMP_DELTA` before the log.
pub const CLAMP_DELTA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceTerm {
    /// Penalize deviation from the mean variance.
    #[default]
    Mean,
    /// Penalize deviation from the sum of variances.
    Sum,
}

impl std::str::FromStr for VarianceTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(VarianceTerm::Mean),
            "sum" => Ok(VarianceTerm::Sum),
            other => Err(Error::InvalidArgument(format!(
                "variance term must be 'mean' or 'sum', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecorrLoss {
    pub total: f64,
    pub corr_term: f64,
    pub var_term: f64,
    /// Number of ordered pairs whose |rho| was clamped.
    pub clamp_count: usize,
}

struct Moments {
    centered: DMatrix<f64>,
    variance: DVector<f64>,
    correlation: DMatrix<f64>,
}

fn moments(batch: &LatentBatch) -> Result<Moments> {
    let n = batch.n_samples();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let centered = centered(batch.data());
    let cov = covariance_of_centered(&centered);
    let variance = DVector::from_fn(cov.nrows(), |i, _| cov[(i, i)].max(0.0));
    let correlation = correlation_from_cov(&cov, &variance);
    Ok(Moments {
        centered,
        variance,
        correlation,
    })
}

fn variance_target(variance: &DVector<f64>, term: VarianceTerm) -> f64 {
    let sum: f64 = variance.iter().sum();
    match term {
        VarianceTerm::Mean => sum / variance.len() as f64,
        VarianceTerm::Sum => sum,
    }
}

pub fn decorr_loss(batch: &LatentBatch) -> Result<DecorrLoss> {
    decorr_loss_with(batch, VarianceTerm::Mean)
}

pub fn decorr_loss_with(batch: &LatentBatch, term: VarianceTerm) -> Result<DecorrLoss> {
    let m = moments(batch)?;
    let d = m.variance.len();
    let limit = 1.0 - CLAMP_DELTA;
    let mut corr_term = 0.0;
    let mut clamp_count = 0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let mut r = m.correlation[(i, j)].abs();
            if r > limit {
                r = limit;
                clamp_count += 1;
            }
            corr_term -= (1.0 - r).ln();
        }
    }
    let target = variance_target(&m.variance, term);
    let var_term: f64 = m.variance.iter().map(|v| (v - target).powi(2)).sum();
    Ok(DecorrLoss {
        total: corr_term + var_term,
        corr_term,
        var_term,
        clamp_count,
    })
}

pub fn decorr_grad(batch: &LatentBatch) -> Result<DMatrix<f64>> {
    decorr_grad_with(batch, VarianceTerm::Mean)
}

/// Analytic gradient of [`DecorrLoss::total`] with respect to every batch
/// entry. Clamped pairs and pairs involving a zero-variance column contribute
/// nothing; `sign(0)` is taken as 0.
pub fn decorr_grad_with(batch: &LatentBatch, term: VarianceTerm) -> Result<DMatrix<f64>> {
    let m = moments(batch)?;
    let d = m.variance.len();
    let n = batch.n_samples();
    let limit = 1.0 - CLAMP_DELTA;

    // dL/dC_kj scaled by 1/sqrt(V_k V_j); per-column coefficient of dV_k.
    let mut cross = DMatrix::<f64>::zeros(d, d);
    let mut var_coef = DVector::<f64>::zeros(d);
    for i in 0..d {
        for j in 0..d {
            if i == j || m.variance[i] <= 0.0 || m.variance[j] <= 0.0 {
                continue;
            }
            let rho = m.correlation[(i, j)];
            if rho.abs() > limit || rho == 0.0 {
                continue;
            }
            let g = rho.signum() / (1.0 - rho.abs());
            cross[(i, j)] = g / (m.variance[i] * m.variance[j]).sqrt();
            var_coef[i] -= g * rho / m.variance[i];
        }
    }

    let target = variance_target(&m.variance, term);
    let weight = match term {
        VarianceTerm::Mean => 1.0 / d as f64,
        VarianceTerm::Sum => 1.0,
    };
    let dev_sum: f64 = m.variance.iter().map(|v| v - target).sum();
    for k in 0..d {
        var_coef[k] += 2.0 * (m.variance[k] - target) - 2.0 * weight * dev_sum;
    }

    let scale = 2.0 / (n - 1) as f64;
    let mut grad = &m.centered * &cross;
    for k in 0..d {
        let c = var_coef[k];
        for r in 0..n {
            grad[(r, k)] += c * m.centered[(r, k)];
        }
    }
    grad *= scale;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_gaussian, RngSeed};
    use proptest::prelude::*;

    fn central_difference(batch: &LatentBatch, term: VarianceTerm, h: f64) -> DMatrix<f64> {
        let x = batch.data();
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let mut plus = x.clone();
            plus[(i, j)] += h;
            let mut minus = x.clone();
            minus[(i, j)] -= h;
            let fp = decorr_loss_with(&LatentBatch::new(plus).unwrap(), term).unwrap().total;
            let fm = decorr_loss_with(&LatentBatch::new(minus).unwrap(), term).unwrap().total;
            (fp - fm) / (2.0 * h)
        })
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    pub(crate) fn half_correlated_batch() -> LatentBatch {
        // y = 0.5 x + sqrt(0.75) z with x, z orthogonal, zero mean, equal norm
        let c = 0.75f64.sqrt();
        LatentBatch::from_rows(&[
            vec![1.0, 0.5 + c],
            vec![1.0, 0.5 - c],
            vec![-1.0, -0.5 + c],
            vec![-1.0, -0.5 - c],
        ])
        .unwrap()
    }

    fn square_batch() -> LatentBatch {
        LatentBatch::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ])
        .unwrap()
    }

    #[test]
    fn decorrelated_equal_variance_is_zero() {
        let l = decorr_loss(&square_batch()).unwrap();
        assert!(l.total.abs() < 1e-12);
        assert_eq!(l.clamp_count, 0);
    }

    #[test]
    fn single_dimension_is_zero() {
        let b = sample_gaussian(10, 1, RngSeed(4)).unwrap();
        assert_eq!(decorr_loss(&b).unwrap().total, 0.0);
    }

    #[test]
    fn half_correlation_value() {
        let b = half_correlated_batch();
        let l = decorr_loss(&b).unwrap();
        assert!((l.corr_term - 1.3862943611).abs() < 1e-9, "{}", l.corr_term);
        assert!(l.var_term.abs() < 1e-12);
    }

    #[test]
    fn sum_reading_penalizes_equal_variances() {
        let l = decorr_loss_with(&square_batch(), VarianceTerm::Sum).unwrap();
        // each variance 4/3, sum 8/3, deviation 4/3 per dimension
        assert!((l.var_term - 2.0 * (4.0f64 / 3.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_decorrelated_batch() {
        let g = decorr_grad(&square_batch()).unwrap();
        assert!(g.amax() < 1e-12);
        let fd = central_difference(&square_batch(), VarianceTerm::Mean, 1e-5);
        // |rho| has a kink at 0, so only the variance part is smooth here
        assert!(fd.amax() < 1e-4);
    }

    #[test]
    fn clamped_pairs_have_zero_gradient() {
        let b = LatentBatch::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let l = decorr_loss(&b).unwrap();
        assert_eq!(l.clamp_count, 2);
        assert!((l.corr_term + 2.0 * CLAMP_DELTA.ln()).abs() < 1e-6);
        // only the variance-equalization term acts: grad = 2/(n-1) * dvar_coef * xc
        let g = decorr_grad(&b).unwrap();
        let fd = central_difference(&b, VarianceTerm::Mean, 1e-7);
        // the finite difference stays inside the clamp band
        assert!(rel_err(&g, &fd) < 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let b = sample_gaussian(32, 6, RngSeed(seed)).unwrap();
            for term in [VarianceTerm::Mean, VarianceTerm::Sum] {
                let g = decorr_grad_with(&b, term).unwrap();
                let fd = central_difference(&b, term, 1e-5);
                assert!(rel_err(&g, &fd) < 1e-5, "seed {seed} {term:?}: {}", rel_err(&g, &fd));
            }
        }
    }

    #[test]
    fn insufficient_samples() {
        let b = LatentBatch::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(decorr_loss(&b).unwrap_err().to_string().contains("insufficient samples"));
        assert!(decorr_grad(&b).is_err());
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_decomposes(seed in 0u64..500, n in 2usize..12, d in 1usize..6) {
            let b = sample_gaussian(n, d, RngSeed(seed)).unwrap();
            let l = decorr_loss(&b).unwrap();
            prop_assert!(l.corr_term >= 0.0);
            prop_assert!(l.var_term >= 0.0);
            prop_assert_eq!(l.total, l.corr_term + l.var_term);
        }

        #[test]
        fn loss_invariant_to_translation_and_dim_permutation(seed in 0u64..500, shift in -5.0f64..5.0) {
            let b = sample_gaussian(16, 4, RngSeed(seed)).unwrap();
            let base = decorr_loss(&b).unwrap().total;
            let moved = b.data().map(|x| x + shift);
            let perm = DMatrix::from_fn(16, 4, |i, j| b.data()[(i, (j + 1) % 4)]);
            let l_moved = decorr_loss(&LatentBatch::new(moved).unwrap()).unwrap().total;
            let l_perm = decorr_loss(&LatentBatch::new(perm).unwrap()).unwrap().total;
            prop_assert!((l_moved - base).abs() <= 1e-9 * base.max(1.0));
            prop_assert!((l_perm - base).abs() <= 1e-12 * base.max(1.0));
        }
    }
}
