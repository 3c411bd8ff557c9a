//! Dense latent batches, seeded sampling and batch statistics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed for every random stream in the crate.
///
/// The same seed and the same sequence of draws always give the same values;
/// the generator is ChaCha8, which is portable across platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent seed for a named sub-stream.
    pub fn derive(self, stream: u64) -> RngSeed {
        // splitmix64 finalizer
        let mut z = self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

impl From<u64> for RngSeed {
    fn from(seed: u64) -> Self {
        RngSeed(seed)
    }
}

/// An N×d batch of latent codes, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    data: DMatrix<f64>,
}

impl LatentBatch {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent batch must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "latent batch entry ({}, {}) is not finite",
                pos % data.nrows(),
                pos / data.nrows()
            )));
        }
        Ok(LatentBatch { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("ragged rows in latent batch".into()));
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

/// Draws an n×d batch of i.i.d. standard normal entries, filled row by row.
pub fn sample_gaussian(n: usize, d: usize, seed: RngSeed) -> Result<LatentBatch> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample_gaussian needs n >= 1 and d >= 1, got n={n}, d={d}"
        )));
    }
    let mut rng = seed.rng();
    Ok(LatentBatch {
        data: gaussian_matrix(n, d, &mut rng),
    })
}

/// Row-major fill of an n×d standard normal matrix from an existing stream.
pub fn gaussian_matrix<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Per-dimension mean, unbiased variance and Pearson correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub correlation: DMatrix<f64>,
}

/// Sample statistics of a batch.
///
/// A column with zero variance has correlation 0 with every other column and
/// 1 with itself.
pub fn batch_stats(batch: &LatentBatch) -> Result<BatchStats> {
    let n = batch.n_samples();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let centered = centered(batch.data());
    let cov = covariance_of_centered(&centered);
    let d = cov.nrows();
    let variance = DVector::from_fn(d, |i, _| cov[(i, i)].max(0.0));
    let correlation = correlation_from_cov(&cov, &variance);
    let mean = column_means(batch.data());
    Ok(BatchStats {
        mean,
        variance,
        correlation,
    })
}

pub(crate) fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_fn(x.ncols(), |j, _| x.column(j).iter().sum::<f64>() / n)
}

pub(crate) fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_means(x);
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Unbiased covariance of an already centered matrix.
pub(crate) fn covariance_of_centered(xc: &DMatrix<f64>) -> DMatrix<f64> {
    let denom = (xc.nrows() - 1) as f64;
    let d = xc.ncols();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let c = xc.column(i).dot(&xc.column(j)) / denom;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    cov
}

pub(crate) fn correlation_from_cov(cov: &DMatrix<f64>, variance: &DVector<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if variance[i] > 0.0 && variance[j] > 0.0 {
            (cov[(i, j)] / (variance[i] * variance[j]).sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
}
