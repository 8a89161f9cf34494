//! Evaluation: sparsity, clustering agreement, PCA, K-Means and
//! reconstruction error.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DpcnError, Result};
use crate::model::{LayerModel, PatchBatch, StateVector};
use crate::tensor::Vector;

/// Percentage of components with `|v_k| ≤ threshold`.
pub fn sparsity(v: &[f64], threshold: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(DpcnError::EmptyVector);
    }
    if !(threshold >= 0.0) {
        return Err(DpcnError::InvalidConfig("sparsity threshold must be >= 0".into()));
    }
    let zeros = v.iter().filter(|x| x.abs() <= threshold).count();
    Ok(100.0 * zeros as f64 / v.len() as f64)
}

/// Mean sparsity over a set of vectors.
pub fn mean_sparsity<'a, I>(vectors: I, threshold: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for v in vectors {
        total += sparsity(v, threshold)?;
        n += 1;
    }
    if n == 0 {
        return Err(DpcnError::EmptyVector);
    }
    Ok(total / n as f64)
}

struct Contingency {
    /// `(true, pred) → count`
    cells: HashMap<(usize, usize), usize>,
    true_sizes: Vec<usize>,
    pred_sizes: Vec<usize>,
    n: usize,
}

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn contingency(labels_true: &[usize], labels_pred: &[usize]) -> Result<Contingency> {
    if labels_true.len() != labels_pred.len() {
        return Err(DpcnError::LengthMismatch(labels_true.len(), labels_pred.len()));
    }
    let (t, nt) = dense_ids(labels_true);
    let (p, np) = dense_ids(labels_pred);
    let mut cells = HashMap::new();
    let mut true_sizes = vec![0; nt];
    let mut pred_sizes = vec![0; np];
    for (a, b) in t.iter().zip(&p) {
        *cells.entry((*a, *b)).or_insert(0) += 1;
        true_sizes[*a] += 1;
        pred_sizes[*b] += 1;
    }
    Ok(Contingency {
        cells,
        true_sizes,
        pred_sizes,
        n: labels_true.len(),
    })
}

fn entropy(sizes: &[usize], n: usize) -> f64 {
    let n = n as f64;
    sizes
        .iter()
        .filter(|s| **s > 0)
        .map(|s| {
            let p = *s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Completeness `1 − H(pred | true) / H(pred)`: 1 exactly when all members
/// of each true class share one predicted cluster. Defined as 1 when
/// `H(pred) = 0`, so a single predicted cluster scores 1.
pub fn completeness(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64> {
    let c = contingency(labels_true, labels_pred)?;
    if c.n == 0 {
        return Ok(1.0);
    }
    let h_pred = entropy(&c.pred_sizes, c.n);
    if h_pred == 0.0 {
        return Ok(1.0);
    }
    let n = c.n as f64;
    let h_pred_given_true: f64 = c
        .cells
        .iter()
        .map(|(&(t, _), &count)| {
            let joint = count as f64 / n;
            let cond = count as f64 / c.true_sizes[t] as f64;
            -joint * cond.ln()
        })
        .sum();
    Ok((1.0 - h_pred_given_true / h_pred).clamp(0.0, 1.0))
}

fn comb2(v: usize) -> f64 {
    let v = v as f64;
    v * (v - 1.0) / 2.0
}

/// Pair-counting adjusted Rand index.
pub fn adjusted_rand_index(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64> {
    let c = contingency(labels_true, labels_pred)?;
    let index: f64 = c.cells.values().map(|v| comb2(*v)).sum();
    let a: f64 = c.true_sizes.iter().map(|v| comb2(*v)).sum();
    let b: f64 = c.pred_sizes.iter().map(|v| comb2(*v)).sum();
    let total = comb2(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if max == expected {
        // both partitions trivial in the same way
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Best one-to-one matching accuracy between predicted clusters and classes.
/// Reported next to completeness, which is what the clustering `ACC` means
/// here.
pub fn hungarian_accuracy(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64> {
    let c = contingency(labels_true, labels_pred)?;
    if c.n == 0 {
        return Ok(1.0);
    }
    let size = c.true_sizes.len().max(c.pred_sizes.len());
    let mut weights = pathfinding::matrix::Matrix::new(size, size, 0i64);
    for (&(t, p), &count) in &c.cells {
        weights[(p, t)] = count as i64;
    }
    let (matched, _) = pathfinding::kuhn_munkres::kuhn_munkres(&weights);
    Ok(matched as f64 / c.n as f64)
}

/// Result of [`pca_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub points: Vec<Vector>,
    /// Covariance eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
    /// Set when the covariance rank is below `dims_out`; the missing
    /// coordinates are zero.
    pub degenerate: bool,
}

/// Project mean-centered points onto the top `dims_out` covariance
/// eigenvectors. Each direction is signed so that its largest-magnitude
/// component is positive.
pub fn pca_project(points: &[Vector], dims_out: usize) -> Result<PcaProjection> {
    if points.len() < 2 {
        return Err(DpcnError::DegenerateData("PCA needs at least two points".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(DpcnError::DimensionMismatch("points of unequal length".into()));
    }
    if dims_out > d {
        return Err(DpcnError::DegenerateData(format!(
            "cannot keep {dims_out} of {d} dimensions"
        )));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = top * d as f64 * f64::EPSILON * 16.0;

    let mut degenerate = false;
    let mut directions: Vec<Option<Vec<f64>>> = Vec::with_capacity(dims_out);
    let mut eigenvalues = Vec::with_capacity(dims_out);
    for &idx in order.iter().take(dims_out) {
        let lambda = eig.eigenvalues[idx];
        eigenvalues.push(lambda.max(0.0));
        if lambda <= tol {
            degenerate = true;
            directions.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |(bi, bv), (i, x)| {
                if x.abs() > bv.abs() + 1e-12 {
                    (i, *x)
                } else {
                    (bi, bv)
                }
            })
            .1;
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        directions.push(Some(v));
    }

    let projected = (0..n)
        .map(|i| {
            directions
                .iter()
                .map(|dir| match dir {
                    Some(v) => (0..d).map(|j| centered[(i, j)] * v[j]).sum(),
                    None => 0.0,
                })
                .collect::<Vec<f64>>()
                .into()
        })
        .collect();
    Ok(PcaProjection {
        points: projected,
        eigenvalues,
        degenerate,
    })
}

/// Result of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vector>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vector]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd's algorithm from a k-means++ start drawn with a seeded ChaCha8 stream.
pub fn kmeans(points: &[Vector], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(DpcnError::InvalidK { k, points: n });
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(DpcnError::DimensionMismatch("points of unequal length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vector> = vec![points[rng.random_range(0..n)].clone()];
    let mut chosen = vec![false; n];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // every point coincides with a centroid: take unused points in order
            (0..n).find(|i| !chosen[*i]).unwrap_or(0)
        };
        chosen[idx] = true;
        centroids.push(points[idx].clone());
    }

    let mut labels = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, dist) = nearest(p, &centroids);
            inertia += dist;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        inertia_trace.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for (c, (s, cnt)) in centroids.iter_mut().zip(sums.into_iter().zip(counts)) {
            // an empty cluster keeps its centroid
            if cnt > 0 {
                *c = s.into_iter().map(|v| v / cnt as f64).collect::<Vec<_>>().into();
            }
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        inertia_trace,
        iterations,
        converged,
    })
}

/// Mean of `(y − C x)²` over every pixel of every patch of every frame.
/// Patches tile their frame exactly, so this equals the per-pixel mean over
/// the reassembled frames.
pub fn reconstruction_mse(
    frames: &[PatchBatch],
    states: &[Vec<StateVector>],
    model: &LayerModel,
) -> Result<f64> {
    if frames.len() != states.len() {
        return Err(DpcnError::DimensionMismatch(format!(
            "{} frames, {} state sets",
            frames.len(),
            states.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (batch, xs) in frames.iter().zip(states) {
        if xs.len() != batch.n() {
            return Err(DpcnError::DimensionMismatch("state count per frame".into()));
        }
        for (y, x) in batch.patches.iter().zip(xs) {
            if y.len() != model.p() || x.len() != model.k() {
                return Err(DpcnError::DimensionMismatch("patch or state length".into()));
            }
            let cx = model.c.matvec(&x.x);
            total += y.iter().zip(&cx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += y.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Clustering summary for one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    /// Completeness score.
    pub acc: f64,
    pub ari: f64,
    /// Best one-to-one matching accuracy.
    pub hungarian_acc: f64,
    /// Percent.
    pub spa: f64,
    /// Seconds of variable inference per frame.
    pub lct_seconds: f64,
    pub assignments: Vec<usize>,
}

impl ClusterReport {
    pub fn new(labels_true: &[usize], assignments: Vec<usize>, spa: f64, lct_seconds: f64) -> Result<Self> {
        Ok(ClusterReport {
            acc: completeness(labels_true, &assignments)?,
            ari: adjusted_rand_index(labels_true, &assignments)?,
            hungarian_acc: hungarian_accuracy(labels_true, &assignments)?,
            spa,
            lct_seconds,
            assignments,
        })
    }
}
