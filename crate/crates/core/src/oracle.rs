//! Synthetic linear-generative world with planted ground truth.
//!
//! Scalar semantics are exact linear functionals `v*ᵀw` and the canonical
//! target is `bias + U*V*ᵀw`, both observed with additive Gaussian noise.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{gaussian_matrix, RngSeed};
use crate::linalg::orthonormal_columns;

const MAGNITUDE_RANGE: (f64, f64) = (0.5, 2.0);

fn default_semantics() -> Vec<String> {
    vec!["yaw".to_string(), "pitch".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub d: usize,
    #[serde(alias = "S")]
    pub s: usize,
    pub p_true: usize,
    pub sparsity: f64,
    pub noise_sigma: f64,
    pub seed: RngSeed,
    /// Names of the planted scalar semantics.
    #[serde(default = "default_semantics")]
    pub semantics: Vec<String>,
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.s == 0 {
            return Err(Error::InvalidArgument("oracle needs d >= 1 and S >= 1".into()));
        }
        if self.p_true > self.s.min(self.d) {
            return Err(Error::InvalidArgument(format!(
                "p_true = {} exceeds min(S, d) = {}",
                self.p_true,
                self.s.min(self.d)
            )));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sparsity must lie in (0, 1], got {}",
                self.sparsity
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Nonzero entries per planted component.
    pub fn support_size(&self) -> usize {
        ((self.sparsity * self.s as f64).round() as usize).clamp(1, self.s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleWorld {
    pub spec: OracleSpec,
    /// S×p_true sparse planted components.
    pub u_star: DMatrix<f64>,
    /// d×p_true, orthonormal columns.
    pub v_star: DMatrix<f64>,
    pub direction_truths: BTreeMap<String, DVector<f64>>,
    pub bias: DVector<f64>,
}

pub fn make_world(spec: &OracleSpec) -> Result<OracleWorld> {
    spec.validate()?;
    let mut rng = spec.seed.derive(0x0A11).rng();

    let v_star = if spec.p_true == 0 {
        DMatrix::zeros(spec.d, 0)
    } else {
        orthonormal_columns(gaussian_matrix(spec.d, spec.p_true, &mut rng))
    };

    let k = spec.support_size();
    let mut u_star = DMatrix::zeros(spec.s, spec.p_true);
    for p in 0..spec.p_true {
        let mut support = index::sample(&mut rng, spec.s, k).into_vec();
        support.sort_unstable();
        let values: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let magnitude = rng.random_range(MAGNITUDE_RANGE.0..=MAGNITUDE_RANGE.1);
        for (row, value) in support.into_iter().zip(values) {
            u_star[(row, p)] = value / norm * magnitude;
        }
    }

    let mut direction_truths = BTreeMap::new();
    for name in &spec.semantics {
        let raw = gaussian_matrix(spec.d, 1, &mut rng).column(0).into_owned();
        let norm = raw.norm();
        direction_truths.insert(name.clone(), raw / norm);
    }
    let bias = gaussian_matrix(spec.s, 1, &mut rng).column(0).into_owned();

    Ok(OracleWorld {
        spec: spec.clone(),
        u_star,
        v_star,
        direction_truths,
        bias,
    })
}

impl OracleWorld {
    /// The noiseless Jacobian U*V*ᵀ.
    pub fn jacobian_truth(&self) -> DMatrix<f64> {
        &self.u_star * self.v_star.transpose()
    }

    pub fn direction(&self, name: &str) -> Result<&DVector<f64>> {
        self.direction_truths
            .get(name)
            .ok_or_else(|| Error::UnknownSemantic(name.to_string()))
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.spec.noise_sigma == 0.0 {
            0.0
        } else {
            self.spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        }
    }

    pub fn observe_scalar<R: Rng + ?Sized>(
        &self,
        name: &str,
        w: &DVector<f64>,
        rng: &mut R,
    ) -> Result<f64> {
        let v = self.direction(name)?;
        if w.len() != v.len() {
            return Err(Error::ShapeMismatch(format!(
                "latent code has dimension {} but the world has {}",
                w.len(),
                v.len()
            )));
        }
        Ok(v.dot(w) + self.noise(rng))
    }

    pub fn observe_canonical<R: Rng + ?Sized>(
        &self,
        w: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if w.len() != self.spec.d {
            return Err(Error::ShapeMismatch(format!(
                "latent code has dimension {} but the world has {}",
                w.len(),
                self.spec.d
            )));
        }
        let code = self.v_star.tr_mul(w);
        let mut out = &self.bias + &self.u_star * code;
        for x in out.iter_mut() {
            *x += self.noise(rng);
        }
        Ok(out)
    }

    /// Samples `n` latent pairs and observes every semantic on both ends.
    pub fn simulate_pairs<R: Rng + ?Sized>(
        &self,
        n: usize,
        pairing: Pairing,
        rng: &mut R,
    ) -> Result<ObservedPairs> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one pair".into()));
        }
        let d = self.spec.d;
        let w0 = gaussian_matrix(n, d, rng);
        let w1 = match pairing {
            Pairing::Independent => gaussian_matrix(n, d, rng),
            Pairing::Perturbation { scale } => {
                if !(scale > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "perturbation scale must be positive, got {scale}"
                    )));
                }
                &w0 + gaussian_matrix(n, d, rng) * scale
            }
        };
        let mut scalars = BTreeMap::new();
        for name in self.direction_truths.keys() {
            let mut dy = DVector::zeros(n);
            for i in 0..n {
                let a = self.observe_scalar(name, &w0.row(i).transpose(), rng)?;
                let b = self.observe_scalar(name, &w1.row(i).transpose(), rng)?;
                dy[i] = b - a;
            }
            scalars.insert(name.clone(), dy);
        }
        let mut targets = DMatrix::zeros(n, self.spec.s);
        for i in 0..n {
            let a = self.observe_canonical(&w0.row(i).transpose(), rng)?;
            let b = self.observe_canonical(&w1.row(i).transpose(), rng)?;
            targets.row_mut(i).copy_from(&(b - a).transpose());
        }
        Ok(ObservedPairs {
            delta_w: w1 - w0,
            delta_scalars: scalars,
            delta_targets: targets,
        })
    }
}

/// How the second latent code of each pair is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Pairing {
    /// Both codes drawn independently from N(0, I).
    #[default]
    Independent,
    /// `w₁ = w₀ + scale·ε`, ε ~ N(0, I).
    Perturbation { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPairs {
    pub delta_w: DMatrix<f64>,
    pub delta_scalars: BTreeMap<String, DVector<f64>>,
    pub delta_targets: DMatrix<f64>,
}
