//! Stacked per-target regression: the canonical Jacobian J (S×d).

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::NormalEquations;

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    data: DMatrix<f64>,
    target_shape: Vec<usize>,
}

impl JacobianMatrix {
    pub fn new(data: DMatrix<f64>, target_shape: Vec<usize>) -> Result<Self> {
        let product: usize = target_shape.iter().product();
        if target_shape.is_empty() || product != data.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "target shape {:?} does not multiply to {} rows",
                target_shape,
                data.nrows()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("jacobian has non-finite entries".into()));
        }
        Ok(JacobianMatrix { data, target_shape })
    }

    /// A Jacobian whose targets form a flat vector.
    pub fn flat(data: DMatrix<f64>) -> Result<Self> {
        let s = data.nrows();
        Self::new(data, vec![s])
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.target_shape
    }

    pub fn targets(&self) -> usize {
        self.data.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Regresses every target column of `delta_targets` (N×S) on `delta_w` (N×d).
///
/// Row p of the result is the unnormalized least-squares solution for target
/// p. One factorization of ΔWᵀΔW serves all S solves; each row is computed
/// independently, so the result does not depend on thread scheduling.
pub fn build_jacobian(
    delta_w: &DMatrix<f64>,
    delta_targets: &DMatrix<f64>,
    target_shape: Option<Vec<usize>>,
) -> Result<JacobianMatrix> {
    if delta_w.nrows() != delta_targets.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "ΔW has {} rows but targets have {}",
            delta_w.nrows(),
            delta_targets.nrows()
        )));
    }
    let s = delta_targets.ncols();
    if s == 0 {
        return Err(Error::InvalidArgument("targets have no columns".into()));
    }
    let solver = NormalEquations::new(delta_w, 0.0)?;
    let d = delta_w.ncols();
    let rows: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|p| {
            let coef = solver.solve(&delta_targets.column(p).into_owned());
            coef.iter().copied().collect()
        })
        .collect();
    let data = DMatrix::from_fn(s, d, |p, j| rows[p][j]);
    JacobianMatrix::new(data, target_shape.unwrap_or_else(|| vec![s]))
}
