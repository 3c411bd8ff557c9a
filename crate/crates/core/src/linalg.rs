//! Shared least-squares machinery for the regression modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Factorization of the regularized normal matrix `ΔWᵀΔW + ridge·I`, reused
/// for any number of right-hand sides.
///
/// The symmetric eigendecomposition doubles as the rank test: with
/// `ridge == 0` the system is rejected when the smallest eigenvalue falls
/// below `max(N, d)·ε·λ_max`.
pub(crate) struct NormalEquations {
    design: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    inv_eigvals: DVector<f64>,
}

impl NormalEquations {
    pub(crate) fn new(design: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge must be a finite non-negative number, got {ridge}"
            )));
        }
        let (n, d) = design.shape();
        if d == 0 {
            return Err(Error::InvalidArgument("design matrix has no columns".into()));
        }
        if ridge == 0.0 && n <= d {
            return Err(Error::RankDeficient);
        }
        let mut gram = design.tr_mul(design);
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let eig = SymmetricEigen::new(gram);
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.min();
        let tol = (n.max(d) as f64) * f64::EPSILON * max;
        if !(max > 0.0) || min <= tol {
            return Err(Error::RankDeficient);
        }
        Ok(NormalEquations {
            design: design.clone(),
            inv_eigvals: eig.eigenvalues.map(|l| 1.0 / l),
            eigvecs: eig.eigenvectors,
        })
    }

    /// Least-squares coefficients for one target column.
    pub(crate) fn solve(&self, target: &DVector<f64>) -> DVector<f64> {
        let rhs = self.design.tr_mul(target);
        let mut coef = self.eigvecs.tr_mul(&rhs);
        coef.component_mul_assign(&self.inv_eigvals);
        &self.eigvecs * coef
    }

    pub(crate) fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
}

/// Orthonormal basis of the column space of a full-column-rank matrix.
pub(crate) fn orthonormal_columns(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix signs so that diag(R) > 0, making the basis unique
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
