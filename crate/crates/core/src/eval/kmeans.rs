//! Spherical k-means and class-count estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize_in_place, Matrix};
use crate::rng::Rng;

use super::ContingencyMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of cosine similarities of points to their centroids.
    pub objective: f64,
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, mu) in centroids.iter_rows().enumerate() {
        let s = dot(point, mu);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// Seeding with probability proportional to cosine distance from the
/// nearest chosen centroid.
fn seed_centroids(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| 1.0 - dot(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().map(|d| d.max(0.0)).sum();
        let pick = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                target -= d.max(0.0);
                if target < 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(1.0 - dot(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn lloyd(points: &Matrix, mut centroids: Matrix, max_iter: usize) -> KMeansResult {
    let (n, k) = (points.rows(), centroids.rows());
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut sims = vec![0.0; n];
        for i in 0..n {
            let (c, s) = nearest(points.row(i), &centroids);
            sims[i] = s;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut sizes = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            sizes[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if sizes[c] == 0 || l2_normalize_in_place(sums.row_mut(c)).is_err() {
                // reseed an empty cluster at the worst-fit point
                let worst = (0..n)
                    .min_by(|&a, &b| sims[a].total_cmp(&sims[b]))
                    .unwrap_or(0);
                sums.row_mut(c).copy_from_slice(points.row(worst));
                sims[worst] = f64::INFINITY;
            }
        }
        centroids = sums;
    }
    let mut objective = 0.0;
    for i in 0..n {
        let (c, s) = nearest(points.row(i), &centroids);
        assignments[i] = c;
        objective += s;
    }
    KMeansResult {
        centroids,
        assignments,
        objective,
    }
}

/// Cosine k-means on unit-norm rows; keeps the restart with the highest
/// objective.
pub fn spherical_kmeans(points: &Matrix, k: usize, config: &KMeansConfig, rng: &mut Rng) -> Result<KMeansResult> {
    if k == 0 || k > points.rows() {
        return Err(Error::InvalidConfig(format!(
            "cannot form {k} clusters from {} points",
            points.rows()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.restarts.max(1) {
        let result = lloyd(points, seed_centroids(points, k, rng), config.max_iter);
        if best.as_ref().is_none_or(|b| result.objective > b.objective) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean over points of `(b - a) / max(a, b)` with `a` the cosine distance
/// to the own centroid and `b` the distance to the closest other centroid.
fn centroid_silhouette(points: &Matrix, result: &KMeansResult) -> f64 {
    let k = result.centroids.rows();
    if k < 2 || points.rows() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &own) in result.assignments.iter().enumerate() {
        let a = 1.0 - dot(points.row(i), result.centroids.row(own));
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| 1.0 - dot(points.row(i), result.centroids.row(c)))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / points.rows() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub labeled_accuracy: f64,
    pub silhouette: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassNumberEstimate {
    pub best_k: usize,
    pub scores: Vec<KScore>,
}

/// Clusters labeled and unlabeled embeddings together for every candidate
/// count. Each candidate is scored by the matched clustering accuracy on
/// the labeled rows plus the centroid silhouette over all rows; the best
/// score wins, ties going to the smaller count.
pub fn estimate_class_number(
    labeled: &Matrix,
    labels: &[usize],
    unlabeled: &Matrix,
    candidates: &[usize],
    config: &KMeansConfig,
    rng: &mut Rng,
) -> Result<ClassNumberEstimate> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("candidate range is empty".into()));
    }
    if labels.len() != labeled.rows() {
        return Err(Error::ShapeMismatch("one label per labeled row".into()));
    }
    if labeled.rows() > 0 && unlabeled.rows() > 0 && labeled.cols() != unlabeled.cols() {
        return Err(Error::ShapeMismatch("labeled and unlabeled widths differ".into()));
    }
    let cols = labeled.cols().max(unlabeled.cols());
    let mut points = Matrix::zeros(labeled.rows() + unlabeled.rows(), cols);
    for (i, row) in labeled.iter_rows().chain(unlabeled.iter_rows()).enumerate() {
        points.row_mut(i).copy_from_slice(row);
    }
    let mut candidates = candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();

    let mut scores = Vec::with_capacity(candidates.len());
    for &k in &candidates {
        let result = spherical_kmeans(&points, k, config, rng)?;
        let labeled_accuracy = if labels.is_empty() {
            0.0
        } else {
            let table = ContingencyMatrix::from_pairs(
                result.assignments[..labels.len()].iter().copied().zip(labels.iter().copied()),
            );
            table.best_matching()?.0 as f64 / labels.len() as f64
        };
        let silhouette = centroid_silhouette(&points, &result);
        scores.push(KScore {
            k,
            labeled_accuracy,
            silhouette,
            score: labeled_accuracy + silhouette,
        });
    }
    let best_k = scores
        .iter()
        .fold(None::<&KScore>, |best, s| match best {
            Some(b) if s.score <= b.score => Some(b),
            _ => Some(s),
        })
        .map(|s| s.k)
        .expect("nonempty candidates");
    Ok(ClassNumberEstimate { best_k, scores })
}
