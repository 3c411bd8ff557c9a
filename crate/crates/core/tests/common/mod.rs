//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use ldis_core::cluster::{DissimilarityMatrix, Merge};
use ldis_core::decorr::{decorr_loss_with, VarianceTerm};
use ldis_core::LatentBatch;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Central finite differences of the decorrelation loss, one entry at a time.
pub fn decorr_central_difference(batch: &LatentBatch, term: VarianceTerm, h: f64) -> DMatrix<f64> {
    let x = batch.data();
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        let eval = |delta: f64| {
            let mut y = x.clone();
            y[(i, j)] += delta;
            decorr_loss_with(&LatentBatch::new(y).unwrap(), term).unwrap().total
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    })
}

/// max |a − b| / max |b|.
pub fn normwise_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

/// Ward agglomeration without any recurrence: every candidate merge cost is
/// recomputed from the leaf memberships,
/// 2·nA·nB/(nA+nB)·[mean_AB d² − ½ mean_AA d² − ½ mean_BB d²].
pub fn ward_bruteforce(d: &DMatrix<f64>) -> Vec<Merge> {
    let p = d.nrows();
    let sq = |a: usize, b: usize| d[(a, b)] * d[(a, b)];
    let block_mean = |xs: &[usize], ys: &[usize]| {
        let mut s = 0.0;
        for &x in xs {
            for &y in ys {
                s += sq(x, y);
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    let cost = |xs: &[usize], ys: &[usize]| {
        let (na, nb) = (xs.len() as f64, ys.len() as f64);
        let within = 0.5 * block_mean(xs, xs) + 0.5 * block_mean(ys, ys);
        2.0 * na * nb / (na + nb) * (block_mean(xs, ys) - within)
    };
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..p).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    for step in 0..p.saturating_sub(1) {
        let mut best = (f64::INFINITY, 0, 0);
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let c = cost(&clusters[x].1, &clusters[y].1);
                if c < best.0 {
                    best = (c, x, y);
                }
            }
        }
        let (c, x, y) = best;
        let (b_id, b_leaves) = clusters.remove(y);
        let (a_id, a_leaves) = clusters.remove(x);
        let mut leaves = a_leaves;
        leaves.extend(b_leaves);
        merges.push(Merge {
            a: a_id,
            b: b_id,
            height: c.max(0.0).sqrt(),
            size: leaves.len(),
        });
        clusters.push((p + step, leaves));
    }
    merges
}

/// Pairwise Euclidean distances of `p` random points in `dim` dimensions.
pub fn random_dissimilarity<R: Rng>(p: usize, dim: usize, rng: &mut R) -> DissimilarityMatrix {
    let pts = DMatrix::<f64>::from_fn(p, dim, |_, _| rng.sample(StandardNormal));
    let d = DMatrix::from_fn(p, p, |i, j| (pts.row(i) - pts.row(j)).norm());
    DissimilarityMatrix::new(d, "euclidean").unwrap()
}

/// Unit vectors in `blocks` groups: each group is a jittered, randomly
/// signed copy of one of `blocks` orthonormal axes. Returns the vectors
/// (columns) in shuffled order and the block of every column.
pub fn planted_blocks<R: Rng>(
    dim: usize,
    blocks: usize,
    per_block: usize,
    jitter: f64,
    rng: &mut R,
) -> (DMatrix<f64>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut truth: Vec<usize> = (0..blocks).flat_map(|b| std::iter::repeat_n(b, per_block)).collect();
    truth.shuffle(rng);
    let mut v = DMatrix::zeros(dim, truth.len());
    for (col, &b) in truth.iter().enumerate() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut c = v.column_mut(col);
        for r in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            c[r] = jitter * noise + if r == b { sign } else { 0.0 };
        }
        let n = c.norm();
        c /= n;
    }
    (v, truth)
}

/// True when two labelings describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}
