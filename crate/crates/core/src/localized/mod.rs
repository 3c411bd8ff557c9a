//! Localized component learning.
//!
//! Factors a Jacobian `J` (S×d) as `U V̂ᵀ` by minimizing
//!
//! ```text
//! ‖J − U V̂ᵀ‖_F² + α‖U‖₁ + β Σ_{i≠j} (v̂_iᵀ v̂_j)²    s.t. ‖v̂_p‖₂ = 1
//! ```
//!
//! with alternating Adam steps on `U` and `V̂`. The columns of `V̂` are
//! projected back onto the unit sphere after every step.

mod adam;
mod matching;

use nalgebra::{DMatrix, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::JacobianMatrix;
use crate::latent::RngSeed;
use adam::Adam;

pub use matching::{
    match_components, match_components_with, support_iou, ComponentMatch, Matching,
    DEFAULT_SUPPORT_FRACTION,
};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.01;
/// Tolerance on ‖v̂_p‖ accepted by [`objective`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
const INIT_JITTER: f64 = 1e-3;

/// Sparse components `U` (S×P) paired with unit latent representations `V̂` (d×P).
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentModel {
    pub u: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl ComponentModel {
    pub fn new(u: DMatrix<f64>, v_hat: DMatrix<f64>, alpha: f64, beta: f64) -> Result<Self> {
        if u.ncols() != v_hat.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "U has {} columns but V̂ has {}",
                u.ncols(),
                v_hat.ncols()
            )));
        }
        Ok(ComponentModel { u, v_hat, alpha, beta })
    }

    pub fn components(&self) -> usize {
        self.u.ncols()
    }

    pub fn component_norms(&self) -> Vec<f64> {
        self.u.column_iter().map(|c| c.norm()).collect()
    }

    /// Largest |v̂_iᵀv̂_j| over i ≠ j, 0 when there are fewer than two columns.
    pub fn max_offdiag_overlap(&self) -> f64 {
        let g = self.v_hat.tr_mul(&self.v_hat);
        let p = g.nrows();
        let mut best = 0.0f64;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    best = best.max(g[(i, j)].abs());
                }
            }
        }
        best
    }

    /// Mean of ‖u_p‖₁ over the columns, 0 for an empty model.
    pub fn mean_l1(&self) -> f64 {
        if self.components() == 0 {
            return 0.0;
        }
        self.u.column_iter().map(|c| c.lp_norm(1)).sum::<f64>() / self.components() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub total: f64,
    pub recon: f64,
    pub l1: f64,
    pub ortho: f64,
}

fn ortho_penalty(v_hat: &DMatrix<f64>) -> f64 {
    let g = v_hat.tr_mul(v_hat);
    let p = g.nrows();
    let mut sum = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                sum += g[(i, j)] * g[(i, j)];
            }
        }
    }
    sum
}

fn evaluate(model: &ComponentModel, j: &DMatrix<f64>) -> Objective {
    let mut resid = j.clone();
    resid.gemm(-1.0, &model.u, &model.v_hat.transpose(), 1.0);
    let recon = resid.norm_squared();
    let l1 = model.alpha * model.u.iter().map(|x| x.abs()).sum::<f64>();
    let ortho = model.beta * ortho_penalty(&model.v_hat);
    Objective {
        total: recon + l1 + ortho,
        recon,
        l1,
        ortho,
    }
}

/// Evaluates every term of the factorization objective.
pub fn objective(model: &ComponentModel, j: &JacobianMatrix) -> Result<Objective> {
    let (s, d) = (j.targets(), j.latent_dim());
    if model.u.nrows() != s || model.v_hat.nrows() != d {
        return Err(Error::ShapeMismatch(format!(
            "model is {}x{} / {}x{} but the Jacobian is {s}x{d}",
            model.u.nrows(),
            model.u.ncols(),
            model.v_hat.nrows(),
            model.v_hat.ncols()
        )));
    }
    for (index, col) in model.v_hat.column_iter().enumerate() {
        let norm = col.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::NonUnitColumn { index, norm });
        }
    }
    Ok(evaluate(model, j.data()))
}

/// How the L1 term on `U` is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L1Mode {
    /// Adam on the subgradient, with sign(0) = 0.
    #[default]
    Subgradient,
    /// Proximal (soft-threshold) block step on U with step 1/L.
    Proximal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub seed: RngSeed,
    /// Relative objective decrease per window below which the solver stops.
    pub tol: f64,
    pub window: usize,
    pub l1_mode: L1Mode,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_iters: 500_000,
            lr: 1e-4,
            seed: RngSeed(0),
            tol: 1e-6,
            window: 1000,
            l1_mode: L1Mode::Subgradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub total: f64,
    pub recon: f64,
    pub l1: f64,
    pub ortho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Objective at iteration 0, at every window boundary and at the end.
    pub objective_trace: Vec<TracePoint>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Set when more components were requested than min(S, d).
    pub overcomplete: bool,
}

fn normalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
}

/// Removes the radial part of each column gradient. Adam rescales
/// coordinates independently, so a radial component would otherwise leak
/// into the tangent direction and survive the renormalization.
fn project_to_tangent(grad: &mut DMatrix<f64>, v_hat: &DMatrix<f64>) {
    for (mut g, v) in grad.column_iter_mut().zip(v_hat.column_iter()) {
        let radial = g.dot(&v);
        g.axpy(-radial, &v, 1.0);
    }
}

fn initialize(j: &DMatrix<f64>, p: usize, seed: RngSeed) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s, d) = j.shape();
    let svd = SVD::new(j.clone(), true, true);
    let left = svd.u.expect("svd computed with u");
    let right_t = svd.v_t.expect("svd computed with v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut rng = seed.derive(0x1417).rng();
    let mut v_hat = DMatrix::zeros(d, p);
    let mut u = DMatrix::zeros(s, p);
    for col in 0..p {
        match order.get(col) {
            Some(&k) => {
                v_hat.set_column(col, &right_t.row(k).transpose());
                u.set_column(col, &(left.column(k) * svd.singular_values[k]));
            }
            None => {
                for r in 0..d {
                    v_hat[(r, col)] = rng.sample(StandardNormal);
                }
            }
        }
    }
    for x in v_hat.iter_mut() {
        *x += INIT_JITTER * rng.sample::<f64, _>(StandardNormal);
    }
    normalize_columns(&mut v_hat);
    (u, v_hat)
}

fn trace_point(iteration: usize, o: Objective) -> TracePoint {
    TracePoint {
        iteration,
        total: o.total,
        recon: o.recon,
        l1: o.l1,
        ortho: o.ortho,
    }
}

fn symmetric_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.amax()
}

/// Learns `p` localized components of `j`.
pub fn solve(
    j: &JacobianMatrix,
    p: usize,
    alpha: f64,
    beta: f64,
    config: &SolveConfig,
) -> Result<(ComponentModel, SolveReport)> {
    solve_with_observer(j, p, alpha, beta, config, |_, _| {})
}

/// [`solve`] with a callback invoked after every iteration with the
/// iteration number and the current model.
pub fn solve_with_observer<F>(
    j: &JacobianMatrix,
    p: usize,
    alpha: f64,
    beta: f64,
    config: &SolveConfig,
    mut observer: F,
) -> Result<(ComponentModel, SolveReport)>
where
    F: FnMut(usize, &ComponentModel),
{
    if p == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    for (name, value) in [("alpha", alpha), ("beta", beta)] {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be finite and non-negative, got {value}"
            )));
        }
    }
    if !(config.lr > 0.0) || config.window == 0 {
        return Err(Error::InvalidArgument(
            "learning rate and window must be positive".into(),
        ));
    }
    let jm = j.data();
    let (s, d) = jm.shape();
    let overcomplete = p > s.min(d);
    if overcomplete {
        log::warn!("requested {p} components but min(S, d) = {}", s.min(d));
    }

    let (u, v_hat) = initialize(jm, p, config.seed);
    let mut model = ComponentModel { u, v_hat, alpha, beta };
    let mut adam_u = Adam::new((s, p), config.lr);
    let mut adam_v = Adam::new((d, p), config.lr);

    let mut gram_v = DMatrix::zeros(p, p);
    let mut gram_u = DMatrix::zeros(p, p);
    let mut grad_u = DMatrix::zeros(s, p);
    let mut grad_v = DMatrix::zeros(d, p);

    let start = evaluate(&model, jm);
    check_finite(0, &start)?;
    let mut trace = vec![trace_point(0, start)];
    let mut window_start = start.total;
    let mut converged = false;
    let mut iterations_run = 0;

    for it in 1..=config.max_iters {
        // U step: ∇ = 2(U V̂ᵀV̂ − J V̂) + α sign(U)
        gram_v.gemm_tr(1.0, &model.v_hat, &model.v_hat, 0.0);
        grad_u.gemm(2.0, jm, &model.v_hat, 0.0);
        grad_u.gemm(2.0, &model.u, &gram_v, -1.0);
        match config.l1_mode {
            L1Mode::Subgradient => {
                if alpha > 0.0 {
                    grad_u.zip_apply(&model.u, |g, u| {
                        if u != 0.0 {
                            *g += alpha * u.signum();
                        }
                    });
                }
                adam_u.step(&mut model.u, &grad_u);
            }
            L1Mode::Proximal => {
                let lipschitz = 2.0 * symmetric_spectral_norm(&gram_v);
                if lipschitz > 0.0 {
                    let step = 1.0 / lipschitz;
                    let shrink = alpha * step;
                    model.u.zip_apply(&grad_u, |u, g| {
                        let z = *u - step * g;
                        *u = z.signum() * (z.abs() - shrink).max(0.0);
                    });
                }
            }
        }

        // V̂ step: ∇ = 2(V̂ UᵀU − Jᵀ U) + 4β V̂ (V̂ᵀV̂ − diag)
        gram_u.gemm_tr(1.0, &model.u, &model.u, 0.0);
        grad_v.gemm_tr(2.0, jm, &model.u, 0.0);
        grad_v.gemm(2.0, &model.v_hat, &gram_u, -1.0);
        if beta > 0.0 {
            // gram_v still holds V̂ᵀV̂ from the U step
            gram_v.fill_diagonal(0.0);
            grad_v.gemm(4.0 * beta, &model.v_hat, &gram_v, 1.0);
        }
        project_to_tangent(&mut grad_v, &model.v_hat);
        adam_v.step(&mut model.v_hat, &grad_v);
        normalize_columns(&mut model.v_hat);

        iterations_run = it;
        observer(it, &model);

        let boundary = it % config.window == 0;
        if boundary || it == config.max_iters {
            let o = evaluate(&model, jm);
            check_finite(it, &o)?;
            trace.push(trace_point(it, o));
            if boundary {
                let decrease = (window_start - o.total) / window_start.abs().max(f64::MIN_POSITIVE);
                if decrease < config.tol {
                    converged = true;
                    break;
                }
                window_start = o.total;
            }
        }
    }

    Ok((
        model,
        SolveReport {
            objective_trace: trace,
            iterations_run,
            converged,
            overcomplete,
        },
    ))
}

fn check_finite(iteration: usize, o: &Objective) -> Result<()> {
    if o.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            detail: format!(
                "recon={} l1={} ortho={}; try a smaller learning rate",
                o.recon, o.l1, o.ortho
            ),
        })
    }
}

/// Drops every component with ‖u_p‖₂ < `threshold`, keeping survivor order.
pub fn prune(model: &ComponentModel, threshold: f64) -> Result<ComponentModel> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be non-negative, got {threshold}"
        )));
    }
    let keep: Vec<usize> = model
        .component_norms()
        .into_iter()
        .enumerate()
        .filter(|(_, n)| *n >= threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(ComponentModel {
        u: model.u.select_columns(keep.iter()),
        v_hat: model.v_hat.select_columns(keep.iter()),
        alpha: model.alpha,
        beta: model.beta,
    })
}
