//! Open-world datasets: synthetic vMF mixtures, feature files, known/novel
//! splits, augmentation and multi-view batching.

mod augment;
mod batch;
mod io;

pub use augment::{augment, AugmentConfig};
pub use batch::{BatchSampler, MultiViewBatch, Origin, View};
pub use io::{ingest_features, write_binary, write_csv, FeatureFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::dot;
use crate::rng::Rng;
use crate::vmf::{sample_vmf, VmfParams};

/// One row of a feature file or synthetic draw, before any split.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub label: Option<i64>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(dim: usize, records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    line: i + 1,
                    expected: dim,
                    found: r.features.len(),
                });
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<i64> {
        let mut labels: Vec<i64> = self.records.iter().filter_map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub kappa: f64,
    /// Class means are redrawn until every pairwise cosine is at most this.
    pub max_mean_cosine: f64,
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, per_class: usize, dim: usize, kappa: f64) -> Self {
        Self {
            n_classes,
            per_class,
            dim,
            kappa,
            max_mean_cosine: 0.5,
        }
    }

    /// The fixed benchmark: 10 classes of 500 points in 32 dimensions at
    /// concentration 30.
    pub fn benchmark_s1() -> Self {
        Self::new(10, 500, 32, 30.0)
    }
}

/// Seed under which [`SyntheticSpec::benchmark_s1`] is drawn.
pub const S1_SEED: u64 = 1;

const MAX_MEAN_REDRAWS: usize = 100_000;

/// Class-balanced mixture of vMF clusters with uniformly drawn means.
/// Records are emitted class by class with ids `0..n`.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.dim < 2 {
        return Err(Error::InvalidDimension(spec.dim));
    }
    if spec.n_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            spec.n_classes
        )));
    }
    if !(spec.kappa > 0.0) {
        return Err(Error::InvalidConfig(format!("kappa must be > 0, got {}", spec.kappa)));
    }

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for class in 0..spec.n_classes {
        let mut attempts = 0;
        let mean = loop {
            let candidate = rng.unit_vector(spec.dim);
            if means.iter().all(|m| dot(m, &candidate) <= spec.max_mean_cosine) {
                break candidate;
            }
            attempts += 1;
            if attempts >= MAX_MEAN_REDRAWS {
                return Err(Error::InvalidConfig(format!(
                    "could not place mean {class} with pairwise cosine <= {}",
                    spec.max_mean_cosine
                )));
            }
        };
        means.push(mean);
    }

    let mut records = Vec::with_capacity(spec.n_classes * spec.per_class);
    for (class, mean) in means.into_iter().enumerate() {
        let params = VmfParams::new(mean, spec.kappa)?;
        for features in sample_vmf(&params, spec.per_class, rng) {
            records.push(Record {
                id: records.len() as u64,
                label: Some(class as i64),
                features,
            });
        }
    }
    Dataset::new(spec.dim, records)
}

/// A sample after splitting. `true_class` is a dense class id; known classes
/// occupy `0..n_known`, so they line up with the known prototype rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub input: Vec<f64>,
    pub true_class: Option<usize>,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub dim: usize,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub known_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// Original file label for each dense class id.
    pub class_labels: Vec<i64>,
}

impl SplitDataset {
    pub fn n_classes(&self) -> usize {
        self.known_classes.len() + self.novel_classes.len()
    }

    pub fn n_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn is_known(&self, class: usize) -> bool {
        class < self.known_classes.len()
    }

    /// Moves a random `fraction` of the unlabeled pool out into a held-out
    /// evaluation set.
    pub fn hold_out(mut self, fraction: f64, rng: &mut Rng) -> Result<(SplitDataset, Vec<Sample>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidFraction {
                name: "holdout_fraction",
                value: fraction,
            });
        }
        let n_out = (self.unlabeled.len() as f64 * fraction + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..self.unlabeled.len()).collect();
        rng.shuffle(&mut order);
        let mut out_mask = vec![false; self.unlabeled.len()];
        for &i in &order[..n_out] {
            out_mask[i] = true;
        }
        let mut kept = Vec::new();
        let mut held = Vec::new();
        for (sample, out) in self.unlabeled.into_iter().zip(out_mask) {
            if out {
                held.push(sample);
            } else {
                kept.push(sample);
            }
        }
        self.unlabeled = kept;
        Ok((self, held))
    }
}

fn check_fraction(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidFraction { name, value })
    }
}

fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Splits classes into known and novel, then labels a fraction of each known
/// class. Everything not labeled, including unlabeled rows of the file, goes
/// to the unlabeled pool in file order.
pub fn make_split(
    dataset: &Dataset,
    known_fraction: f64,
    labeling_ratio: f64,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    check_fraction("known_fraction", known_fraction)?;
    check_fraction("labeling_ratio", labeling_ratio)?;

    let classes = dataset.classes();
    let n_known = floor_count(known_fraction, classes.len());
    let mut shuffled = classes.clone();
    rng.shuffle(&mut shuffled);
    let mut known: Vec<i64> = shuffled[..n_known].to_vec();
    known.sort_unstable();
    let novel: Vec<i64> = classes.iter().copied().filter(|c| !known.contains(c)).collect();

    let class_labels: Vec<i64> = known.iter().chain(&novel).copied().collect();
    let dense = |label: i64| class_labels.iter().position(|&c| c == label);

    let mut labeled_mask = vec![false; dataset.len()];
    for (k, &label) in known.iter().enumerate() {
        let mut members: Vec<usize> = dataset
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == Some(label))
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut members);
        let take = floor_count(labeling_ratio, members.len());
        for &i in &members[..take] {
            labeled_mask[i] = true;
        }
        debug_assert_eq!(dense(label), Some(k));
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (record, is_labeled) in dataset.records.iter().zip(labeled_mask) {
        let sample = Sample {
            id: record.id,
            input: record.features.clone(),
            true_class: record.label.and_then(dense),
            is_labeled,
        };
        if is_labeled {
            labeled.push(sample);
        } else {
            unlabeled.push(sample);
        }
    }
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    Ok(SplitDataset {
        dim: dataset.dim,
        labeled,
        unlabeled,
        known_classes: (0..known.len()).collect(),
        novel_classes: (known.len()..class_labels.len()).collect(),
        class_labels,
    })
}
