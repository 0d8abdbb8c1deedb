//! Assignment-based evaluation, class-count estimation, and numerical
//! checks of the EM and lower-bound arguments behind the objective.

mod hungarian;
mod kmeans;
pub mod theory;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::prototype::PrototypeStore;

pub use hungarian::{hungarian, Assignment};
pub use kmeans::{estimate_class_number, spherical_kmeans, ClassNumberEstimate, KMeansConfig, KMeansResult, KScore};

/// Co-occurrence counts of predicted ids (rows) against true ids (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyMatrix {
    pub pred_ids: Vec<usize>,
    pub true_ids: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyMatrix {
    /// Rows and columns are the sorted distinct ids present in the pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
        let mut pred_ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut true_ids: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        pred_ids.sort_unstable();
        pred_ids.dedup();
        true_ids.sort_unstable();
        true_ids.dedup();
        let mut counts = vec![vec![0u64; true_ids.len()]; pred_ids.len()];
        for (p, t) in pairs {
            let r = pred_ids.binary_search(&p).unwrap_or_default();
            let c = true_ids.binary_search(&t).unwrap_or_default();
            counts[r][c] += 1;
        }
        Self {
            pred_ids,
            true_ids,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// One-to-one matching of predicted ids to true ids maximizing the
    /// number of agreeing samples. Returns the matched count and the map.
    pub fn best_matching(&self) -> Result<(u64, Vec<(usize, usize)>)> {
        let mut cost = Matrix::zeros(self.pred_ids.len(), self.true_ids.len());
        for (r, row) in self.counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                cost.set(r, c, -(n as f64));
            }
        }
        let assignment = hungarian(&cost)?;
        let mut matched = 0;
        let mut map = Vec::new();
        for (r, col) in assignment.row_to_col.iter().enumerate() {
            if let Some(c) = *col {
                matched += self.counts[r][c];
                map.push((self.pred_ids[r], self.true_ids[c]));
            }
        }
        Ok((matched, map))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallMatching {
    /// One matching over every predicted and true id.
    #[default]
    Free,
    /// Known ids count only as themselves; the matching covers the rest.
    PinnedKnown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub all: f64,
    pub novel: f64,
    pub seen: f64,
}

/// Seen accuracy is exact agreement on samples of known classes (ids below
/// `n_known`); novel and overall accuracy use the best one-to-one relabeling.
/// A subset without samples reports 0.
pub fn accuracy_triple(
    predictions: &[usize],
    truth: &[usize],
    n_known: usize,
    matching: OverallMatching,
) -> Result<AccuracyTriple> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let pairs = || predictions.iter().copied().zip(truth.iter().copied());
    let fraction = |num: u64, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    let seen_total = truth.iter().filter(|&&t| t < n_known).count();
    let seen_hits = pairs().filter(|&(p, t)| t < n_known && p == t).count() as u64;

    let novel = ContingencyMatrix::from_pairs(pairs().filter(|&(_, t)| t >= n_known));
    let novel_total = novel.total() as usize;
    let (novel_hits, _) = novel.best_matching()?;

    let all_hits = match matching {
        OverallMatching::Free => ContingencyMatrix::from_pairs(pairs()).best_matching()?.0,
        OverallMatching::PinnedKnown => {
            let known_hits = pairs().filter(|&(p, t)| p < n_known && p == t).count() as u64;
            let rest = ContingencyMatrix::from_pairs(pairs().filter(|&(p, t)| p >= n_known && t >= n_known));
            known_hits + rest.best_matching()?.0
        }
    };

    Ok(AccuracyTriple {
        all: fraction(all_hits, predictions.len()),
        novel: fraction(novel_hits, novel_total),
        seen: fraction(seen_hits, seen_total),
    })
}

/// Prototypes that received at least one sample since the store's counts
/// were last reset.
pub fn converged_cluster_count(store: &PrototypeStore) -> usize {
    store.active_count()
}
