//! One-to-one matching of recovered components against a reference model.

use serde::{Deserialize, Serialize};

use super::ComponentModel;
use crate::error::{Error, Result};

/// Fraction of the largest |u*| entry above which an entry counts as support.
pub const DEFAULT_SUPPORT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatch {
    pub truth: usize,
    pub found: usize,
    pub abs_cosine: f64,
    pub support_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// One entry per reference component, in reference order.
    pub pairs: Vec<ComponentMatch>,
}

impl Matching {
    pub fn min_abs_cosine(&self) -> f64 {
        self.pairs.iter().map(|p| p.abs_cosine).fold(f64::INFINITY, f64::min)
    }

    pub fn min_support_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.support_iou).fold(f64::INFINITY, f64::min)
    }

    /// Found indices that were not assigned to any reference component.
    pub fn unmatched(&self, found_count: usize) -> Vec<usize> {
        (0..found_count)
            .filter(|f| !self.pairs.iter().any(|p| p.found == *f))
            .collect()
    }
}

pub fn match_components(found: &ComponentModel, truth: &ComponentModel) -> Result<Matching> {
    match_components_with(found, truth, DEFAULT_SUPPORT_FRACTION)
}

/// Assignment maximizing the summed |cos(v̂_found, v̂_truth)|, solved exactly.
pub fn match_components_with(
    found: &ComponentModel,
    truth: &ComponentModel,
    support_fraction: f64,
) -> Result<Matching> {
    let (pf, pt) = (found.components(), truth.components());
    if pf < pt {
        return Err(Error::InvalidArgument(format!(
            "found model has {pf} components but the reference has {pt}"
        )));
    }
    if found.v_hat.nrows() != truth.v_hat.nrows() || found.u.nrows() != truth.u.nrows() {
        return Err(Error::ShapeMismatch("models have different S or d".into()));
    }
    let score: Vec<Vec<f64>> = (0..pt)
        .map(|t| {
            (0..pf)
                .map(|f| abs_cosine(truth.v_hat.column(t).as_slice(), found.v_hat.column(f).as_slice()))
                .collect()
        })
        .collect();
    let assignment = max_weight_assignment(&score);
    let pairs = assignment
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            let truth_u = truth.u.column(t);
            let threshold = support_fraction * truth_u.amax();
            ComponentMatch {
                truth: t,
                found: f,
                abs_cosine: score[t][f],
                support_iou: support_iou(found.u.column(f).as_slice(), truth_u.as_slice(), threshold),
            }
        })
        .collect();
    Ok(Matching { pairs })
}

fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).abs().min(1.0)
    }
}

/// Intersection over union of `{|a| >= t}` and `{|b| >= t}`.
pub fn support_iou(a: &[f64], b: &[f64], threshold: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        let (sx, sy) = (x.abs() >= threshold, y.abs() >= threshold);
        inter += usize::from(sx && sy);
        union += usize::from(sx || sy);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Hungarian algorithm on a rows×cols score matrix with rows <= cols.
/// Returns the chosen column for every row.
pub(crate) fn max_weight_assignment(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    if n == 0 {
        return Vec::new();
    }
    let m = score[0].len();
    debug_assert!(n <= m);
    let cost = |i: usize, j: usize| -score[i - 1][j - 1];
    // potentials and matching use 1-based indices, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}
