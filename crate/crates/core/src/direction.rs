//! Semantic direction regression, latent manipulation and the EMA-smoothed
//! direction used by the augmentation schedule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentBatch;
use crate::linalg::NormalEquations;

/// Latent-code differences ΔW (N×d) and the matching semantic differences ΔY.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSet {
    delta_w: DMatrix<f64>,
    delta_y: DVector<f64>,
}

impl DifferenceSet {
    pub fn new(delta_w: DMatrix<f64>, delta_y: DVector<f64>) -> Result<Self> {
        if delta_w.nrows() != delta_y.len() {
            return Err(Error::ShapeMismatch(format!(
                "ΔW has {} rows but ΔY has {} entries",
                delta_w.nrows(),
                delta_y.len()
            )));
        }
        if delta_w.iter().chain(delta_y.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("difference set has non-finite entries".into()));
        }
        Ok(DifferenceSet { delta_w, delta_y })
    }

    pub fn delta_w(&self) -> &DMatrix<f64> {
        &self.delta_w
    }

    pub fn delta_y(&self) -> &DVector<f64> {
        &self.delta_y
    }

    pub fn len(&self) -> usize {
        self.delta_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_y.is_empty()
    }
}

/// Builds ΔW = w₁ − w₀ and ΔY = y₁ − y₀ row by row.
pub fn make_differences(
    w0: &DMatrix<f64>,
    w1: &DMatrix<f64>,
    y0: &DVector<f64>,
    y1: &DVector<f64>,
) -> Result<DifferenceSet> {
    if w0.shape() != w1.shape() {
        return Err(Error::ShapeMismatch(format!(
            "w0 is {:?} but w1 is {:?}",
            w0.shape(),
            w1.shape()
        )));
    }
    if y0.len() != y1.len() || y0.len() != w0.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} latent pairs but semantics of length {} and {}",
            w0.nrows(),
            y0.len(),
            y1.len()
        )));
    }
    DifferenceSet::new(w1 - w0, y1 - y0)
}

/// Unit manipulation vector with its projection scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionVector {
    #[serde(with = "dvector_serde")]
    pub v: DVector<f64>,
    pub sigma_w: f64,
    pub residual_rms: f64,
}

impl DirectionVector {
    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Raw (unnormalized) regression coefficients and the residual RMS.
pub(crate) fn regress(solver: &NormalEquations, target: &DVector<f64>) -> (DVector<f64>, f64) {
    let coef = solver.solve(target);
    let resid = target - solver.design() * &coef;
    let rms = resid.norm() / (target.len() as f64).sqrt();
    (coef, rms)
}

/// Closed-form ridge regression of ΔY on ΔW, normalized to a unit direction.
///
/// With `ridge == 0` this is the ordinary least-squares solution and needs
/// N > d with ΔW of full column rank.
pub fn fit_direction(diffs: &DifferenceSet, ridge: f64) -> Result<DirectionVector> {
    let solver = NormalEquations::new(&diffs.delta_w, ridge)?;
    let (raw, residual_rms) = regress(&solver, &diffs.delta_y);
    let norm = raw.norm();
    if !(norm > 0.0) {
        return Err(Error::ConstantSemantic);
    }
    Ok(DirectionVector {
        v: raw / norm,
        sigma_w: 0.0,
        residual_rms,
    })
}

/// Sets σ_w to the unbiased standard deviation of `wᵀv` over `reference`.
pub fn attach_sigma(dir: &DirectionVector, reference: &LatentBatch) -> Result<DirectionVector> {
    let n = reference.n_samples();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if reference.dim() != dir.dim() {
        return Err(Error::ShapeMismatch(format!(
            "reference batch has dimension {} but direction has {}",
            reference.dim(),
            dir.dim()
        )));
    }
    let proj = reference.data() * &dir.v;
    let mean = proj.mean();
    let var = proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(DirectionVector {
        sigma_w: var.sqrt(),
        ..dir.clone()
    })
}

/// Replaces the component of `w` along `v` with `s·σ_w`:
/// `w − (wᵀv)v + s·σ_w·v`.
pub fn manipulate(w: &DVector<f64>, dir: &DirectionVector, s: f64) -> Result<DVector<f64>> {
    if w.len() != dir.dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent code has dimension {} but direction has {}",
            w.len(),
            dir.dim()
        )));
    }
    if dir.sigma_w == 0.0 && s != 0.0 {
        log::warn!("manipulating along a direction with sigma_w = 0; the scale has no effect");
    }
    let along = w.dot(&dir.v);
    Ok(w + &dir.v * (s * dir.sigma_w - along))
}

pub const DEFAULT_MOMENTUM: f64 = 0.995;
pub const DEFAULT_UPDATE_INTERVAL: usize = 10;

/// Exponential moving average of a sign-ambiguous unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaDirection {
    #[serde(with = "option_dvector_serde")]
    v_ema: Option<DVector<f64>>,
    momentum: f64,
    update_interval: usize,
    step_counter: usize,
}

impl Default for EmaDirection {
    fn default() -> Self {
        EmaDirection {
            v_ema: None,
            momentum: DEFAULT_MOMENTUM,
            update_interval: DEFAULT_UPDATE_INTERVAL,
            step_counter: 0,
        }
    }
}

impl EmaDirection {
    pub fn new(momentum: f64, update_interval: usize) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in (0, 1), got {momentum}"
            )));
        }
        if update_interval == 0 {
            return Err(Error::InvalidArgument("update interval must be positive".into()));
        }
        Ok(EmaDirection {
            momentum,
            update_interval,
            ..Default::default()
        })
    }

    pub fn direction(&self) -> Option<&DVector<f64>> {
        self.v_ema.as_ref()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn update_interval(&self) -> usize {
        self.update_interval
    }

    pub fn step_counter(&self) -> usize {
        self.step_counter
    }

    /// Whether training iteration `iteration` should trigger a re-fit.
    pub fn is_due(&self, iteration: usize) -> bool {
        iteration.is_multiple_of(self.update_interval)
    }

    /// Folds in a freshly estimated unit direction.
    ///
    /// `new_v` is flipped first if it points away from the running average.
    pub fn update(&mut self, new_v: &DVector<f64>) -> Result<()> {
        let norm = new_v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument("EMA update with a zero direction".into()));
        }
        let unit = new_v / norm;
        let next = match &self.v_ema {
            None => unit,
            Some(current) => {
                if current.len() != unit.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "EMA direction has dimension {} but update has {}",
                        current.len(),
                        unit.len()
                    )));
                }
                let aligned = if current.dot(&unit) < 0.0 { -unit } else { unit };
                let blend = current * self.momentum + aligned * (1.0 - self.momentum);
                let n = blend.norm();
                blend / n
            }
        };
        self.v_ema = Some(next);
        self.step_counter += 1;
        Ok(())
    }
}

/// Uniform draws of the extrapolation scale `s`, by default in [−10, 10].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationScale {
    low: f64,
    high: f64,
}

impl Default for AugmentationScale {
    fn default() -> Self {
        AugmentationScale {
            low: -10.0,
            high: 10.0,
        }
    }
}

impl AugmentationScale {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low <= high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid augmentation bounds [{low}, {high}]"
            )));
        }
        Ok(AugmentationScale { low, high })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.low, self.high)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low == self.high {
            return self.low;
        }
        rng.random_range(self.low..=self.high)
    }
}

pub(crate) mod dvector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

mod option_dvector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DVector<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|x| x.as_slice().to_vec()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DVector<f64>>, D::Error> {
        Ok(Option::<Vec<f64>>::deserialize(d)?.map(DVector::from_vec))
    }
}
