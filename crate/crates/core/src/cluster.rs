//! Ward agglomerative clustering of latent directions.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `1 − |cos|`, invariant to the sign of either vector.
    #[default]
    AbsCosine,
    /// `|1 − cos|`.
    AbsOneMinusCosine,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::AbsCosine => "abs-cosine",
            Metric::AbsOneMinusCosine => "abs-one-minus-cosine",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs-cosine" => Ok(Metric::AbsCosine),
            "abs-one-minus-cosine" => Ok(Metric::AbsOneMinusCosine),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    data: DMatrix<f64>,
    metric_tag: String,
}

impl DissimilarityMatrix {
    pub fn new(data: DMatrix<f64>, metric_tag: impl Into<String>) -> Result<Self> {
        if !data.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "dissimilarity matrix must be square, got {:?}",
                data.shape()
            )));
        }
        let p = data.nrows();
        for i in 0..p {
            if data[(i, i)] != 0.0 {
                return Err(Error::InvalidArgument(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                let x = data[(i, j)];
                if x != data[(j, i)] || !x.is_finite() || x < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) must be finite, non-negative and symmetric"
                    )));
                }
            }
        }
        Ok(DissimilarityMatrix {
            data,
            metric_tag: metric_tag.into(),
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn metric_tag(&self) -> &str {
        &self.metric_tag
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

fn cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "vector sets have dimensions {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let norms = |m: &DMatrix<f64>| -> Result<Vec<f64>> {
        m.column_iter()
            .enumerate()
            .map(|(index, c)| {
                let n = c.norm();
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(Error::ZeroNormColumn { index })
                }
            })
            .collect()
    };
    let (na, nb) = (norms(a)?, norms(b)?);
    let mut c = a.tr_mul(b);
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            c[(i, j)] = (c[(i, j)] / (na[i] * nb[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(c)
}

/// `1 − |cos|` between the columns of `vectors` (d×P).
pub fn abs_cosine_dissimilarity(vectors: &DMatrix<f64>) -> Result<DissimilarityMatrix> {
    dissimilarity(vectors, Metric::AbsCosine)
}

pub fn dissimilarity(vectors: &DMatrix<f64>, metric: Metric) -> Result<DissimilarityMatrix> {
    let c = cosines(vectors, vectors)?;
    let p = c.nrows();
    let data = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            return 0.0;
        }
        // evaluate on the upper triangle so the result is exactly symmetric
        let x = c[(i.min(j), i.max(j))];
        match metric {
            Metric::AbsCosine => 1.0 - x.abs(),
            Metric::AbsOneMinusCosine => (1.0 - x).abs(),
        }
    });
    DissimilarityMatrix::new(data, metric.tag())
}

/// |cos(a_p, b_q)| for every column pair.
pub fn cross_similarity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cosines(a, b)?.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64, usize)", into = "(usize, usize, f64, usize)")]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

impl From<(usize, usize, f64, usize)> for Merge {
    fn from((a, b, height, size): (usize, usize, f64, usize)) -> Self {
        Merge { a, b, height, size }
    }
}

impl From<Merge> for (usize, usize, f64, usize) {
    fn from(m: Merge) -> Self {
        (m.a, m.b, m.height, m.size)
    }
}

/// Merge history. Leaves are `0..P`; the cluster created by merge `k` has id `P + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_count: usize,
}

/// Ward linkage through the Lance–Williams update
///
/// ```text
/// d(k, i∪j)² = ((n_i+n_k) d(k,i)² + (n_j+n_k) d(k,j)² − n_k d(i,j)²) / (n_i+n_j+n_k)
/// ```
///
/// The pair with the smallest current distance is merged first; ties go to
/// the lexicographically smallest `(a, b)` pair of cluster ids.
pub fn ward_linkage(dist: &DissimilarityMatrix) -> Result<Dendrogram> {
    let p = dist.len();
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "clustering needs at least two items, got {p}"
        )));
    }
    let total = 2 * p - 1;
    // squared distances indexed by cluster id
    let mut sq = vec![vec![0.0f64; total]; total];
    for i in 0..p {
        for j in 0..p {
            sq[i][j] = dist.data()[(i, j)].powi(2);
        }
    }
    let mut size = vec![0usize; total];
    size[..p].fill(1);
    let mut active: Vec<usize> = (0..p).collect();
    let mut merges = Vec::with_capacity(p - 1);

    for step in 0..p - 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                if sq[a][b] < best.0 {
                    best = (sq[a][b], a, b);
                }
            }
        }
        let (d2, a, b) = best;
        let new = p + step;
        let (na, nb) = (size[a] as f64, size[b] as f64);
        active.retain(|&c| c != a && c != b);
        for &k in &active {
            let nk = size[k] as f64;
            let v = ((na + nk) * sq[k][a] + (nb + nk) * sq[k][b] - nk * d2) / (na + nb + nk);
            let v = v.max(0.0);
            sq[k][new] = v;
            sq[new][k] = v;
        }
        size[new] = size[a] + size[b];
        active.push(new);
        merges.push(Merge {
            a,
            b,
            height: d2.sqrt(),
            size: size[new],
        });
    }
    Ok(Dendrogram {
        merges,
        leaf_count: p,
    })
}

/// Flat labels from undoing the last `k − 1` merges. Labels are numbered in
/// order of first appearance over the leaves.
pub fn cut_clusters(dendro: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    let p = dendro.leaf_count;
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "cluster count must lie in 1..={p}, got {k}"
        )));
    }
    let mut parent: Vec<usize> = (0..2 * p - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (step, m) in dendro.merges.iter().take(p - k).enumerate() {
        let new = p + step;
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = new;
        parent[rb] = new;
    }
    let mut roots: Vec<usize> = Vec::new();
    let labels = (0..p)
        .map(|leaf| {
            let r = find(&mut parent, leaf);
            match roots.iter().position(|&x| x == r) {
                Some(l) => l,
                None => {
                    roots.push(r);
                    roots.len() - 1
                }
            }
        })
        .collect();
    Ok(labels)
}

/// Graphviz description of the merge tree, root at the top.
pub fn to_dot(dendro: &Dendrogram) -> String {
    let p = dendro.leaf_count;
    let mut out = String::from("digraph dendrogram {\n  rankdir=TB;\n");
    for leaf in 0..p {
        let _ = writeln!(out, "  n{leaf} [label=\"{leaf}\", shape=box];");
    }
    for (step, m) in dendro.merges.iter().enumerate() {
        let id = p + step;
        let _ = writeln!(out, "  n{id} [label=\"{:.4}\", shape=ellipse];", m.height);
        let _ = writeln!(out, "  n{id} -> n{};", m.a);
        let _ = writeln!(out, "  n{id} -> n{};", m.b);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: &[&[f64]]) -> DissimilarityMatrix {
        let p = rows.len();
        DissimilarityMatrix::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]), "test").unwrap()
    }

    #[test]
    fn cosine_dissimilarity_cases() {
        let v = DMatrix::from_column_slice(2, 4, &[1., 0., 2., 0., -1., 0., 0., 3.]);
        let d = abs_cosine_dissimilarity(&v).unwrap();
        assert_eq!(d.data()[(0, 1)], 0.0);
        assert_eq!(d.data()[(0, 2)], 0.0);
        assert_eq!(d.data()[(0, 3)], 1.0);
        assert_eq!(d.metric_tag(), "abs-cosine");
        let alt = dissimilarity(&v, Metric::AbsOneMinusCosine).unwrap();
        assert_eq!(alt.data()[(0, 2)], 2.0);
        let zero = DMatrix::from_column_slice(2, 2, &[1., 0., 0., 0.]);
        assert!(matches!(abs_cosine_dissimilarity(&zero), Err(Error::ZeroNormColumn { index: 1 })));
    }

    #[test]
    fn cross_similarity_cases() {
        let a = DMatrix::from_column_slice(3, 2, &[1., 2., 0., 0., 1., -1.]);
        let s = cross_similarity(&a, &a).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15 && (s[(1, 1)] - 1.0).abs() < 1e-15);
        let e = DMatrix::from_column_slice(3, 1, &[0., 0., 1.]);
        let f = DMatrix::from_column_slice(3, 2, &[1., 0., 0., 0., 1., 0.]);
        assert_eq!(cross_similarity(&e, &f).unwrap(), DMatrix::zeros(1, 2));
    }

    #[test]
    fn two_items() {
        let d = ward_linkage(&dm(&[&[0., 0.3], &[0.3, 0.]])).unwrap();
        assert_eq!(d.merges, vec![Merge { a: 0, b: 1, height: 0.3, size: 2 }]);
    }

    #[test]
    fn three_item_hand_example() {
        let d = ward_linkage(&dm(&[&[0., 0.1, 0.9], &[0.1, 0., 0.9], &[0.9, 0.9, 0.]])).unwrap();
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert!((d.merges[0].height - 0.1).abs() < 1e-15);
        assert_eq!((d.merges[1].a, d.merges[1].b), (2, 3));
        assert!((d.merges[1].height - (3.23f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((d.merges[1].height - 1.0376).abs() < 1e-4);
    }

    #[test]
    fn ties_prefer_smallest_pair() {
        let d = ward_linkage(&dm(&[
            &[0., 1., 1., 1.],
            &[1., 0., 1., 1.],
            &[1., 1., 0., 1.],
            &[1., 1., 1., 0.],
        ]))
        .unwrap();
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert_eq!((d.merges[1].a, d.merges[1].b), (2, 3));
    }

    #[test]
    fn cuts() {
        let d = ward_linkage(&dm(&[&[0., 0.1, 0.9], &[0.1, 0., 0.9], &[0.9, 0.9, 0.]])).unwrap();
        assert_eq!(cut_clusters(&d, 1).unwrap(), vec![0, 0, 0]);
        assert_eq!(cut_clusters(&d, 2).unwrap(), vec![0, 0, 1]);
        assert_eq!(cut_clusters(&d, 3).unwrap(), vec![0, 1, 2]);
        assert!(cut_clusters(&d, 0).is_err());
        assert!(cut_clusters(&d, 4).is_err());
    }

    #[test]
    fn planted_blocks() {
        let blocks = [0, 1, 2, 0, 1, 2, 2, 0, 1];
        let p = blocks.len();
        let data = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                0.0
            } else if blocks[i] == blocks[j] {
                0.05
            } else {
                0.9
            }
        });
        let d = ward_linkage(&DissimilarityMatrix::new(data, "planted").unwrap()).unwrap();
        let labels = cut_clusters(&d, 3).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2, 2, 0, 1]);
    }

    #[test]
    fn validation() {
        assert!(ward_linkage(&dm(&[&[0.]])).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[0., 1., 2., 0.]);
        assert!(DissimilarityMatrix::new(asym, "x").is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[1., 1., 1., 0.]);
        assert!(DissimilarityMatrix::new(diag, "x").is_err());
    }

    #[test]
    fn json_lists_merges_as_tuples() {
        let d = ward_linkage(&dm(&[&[0., 0.5], &[0.5, 0.]])).unwrap();
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["merges"], serde_json::json!([[0, 1, 0.5, 2]]));
        assert_eq!(serde_json::from_value::<Dendrogram>(v).unwrap(), d);
    }

    #[test]
    fn dot_output_mentions_every_node() {
        let d = ward_linkage(&dm(&[&[0., 0.1, 0.9], &[0.1, 0., 0.9], &[0.9, 0.9, 0.]])).unwrap();
        let dot = to_dot(&d);
        assert!(dot.starts_with("digraph"));
        for id in 0..5 {
            assert!(dot.contains(&format!("n{id} ")));
        }
    }
}
