//! Class prototypes on the hypersphere: pseudo-labeling, the novelty gate
//! and its percentile calibration, moving-average updates, and OOD scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, dot, l2_normalize_in_place, log_sum_exp, percentile_threshold, softmax, Matrix};
use crate::rng::Rng;

/// One unit row per class. Rows `0..n_known` are the known classes and are
/// index-aligned with the dense label ids; the rest are novel.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    matrix: Matrix,
    n_known: usize,
    assignment_counts: Vec<u64>,
}

impl PrototypeStore {
    /// Rows drawn uniformly on the sphere.
    pub fn random(n_known: usize, n_classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if n_classes == 0 || n_known > n_classes {
            return Err(Error::InvalidConfig(format!(
                "prototype count {n_classes} must be >= 1 and >= known count {n_known}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidDimension(dim));
        }
        let rows: Vec<Vec<f64>> = (0..n_classes).map(|_| rng.unit_vector(dim)).collect();
        Self::from_parts(Matrix::from_rows(&rows)?, n_known, vec![0; n_classes])
    }

    pub fn from_parts(matrix: Matrix, n_known: usize, assignment_counts: Vec<u64>) -> Result<Self> {
        if n_known > matrix.rows() || assignment_counts.len() != matrix.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} prototypes, {n_known} known, {} counts",
                matrix.rows(),
                assignment_counts.len()
            )));
        }
        Ok(Self {
            matrix,
            n_known,
            assignment_counts,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_known(&self) -> usize {
        self.n_known
    }

    pub fn known_ids(&self) -> std::ops::Range<usize> {
        0..self.n_known
    }

    pub fn novel_ids(&self) -> std::ops::Range<usize> {
        self.n_known..self.n_classes()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.matrix.row(class)
    }

    /// Replace a row with the normalized `v`.
    pub fn set_row(&mut self, class: usize, v: &[f64]) -> Result<()> {
        let mut v = v.to_vec();
        l2_normalize_in_place(&mut v)?;
        self.matrix.row_mut(class).copy_from_slice(&v);
        Ok(())
    }

    pub fn assignment_counts(&self) -> &[u64] {
        &self.assignment_counts
    }

    pub fn reset_counts(&mut self) {
        self.assignment_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Prototypes that received at least one sample since the last reset.
    pub fn active_count(&self) -> usize {
        self.assignment_counts.iter().filter(|&&c| c > 0).count()
    }

    /// Cosine similarity of `z` to every prototype.
    pub fn scores(&self, z: &[f64]) -> Vec<f64> {
        self.matrix.iter_rows().map(|mu| dot(mu, z)).collect()
    }

    /// Largest similarity to a known prototype; `-inf` with no known classes.
    pub fn max_known_score(&self, z: &[f64]) -> f64 {
        self.known_ids()
            .map(|c| dot(self.matrix.row(c), z))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restrict {
    All,
    NovelOnly,
}

/// Highest-scoring prototype in the selected subset, ties to the lowest id.
/// `None` when the subset is empty.
pub fn pseudo_label(z: &[f64], store: &PrototypeStore, restrict: Restrict) -> Option<usize> {
    let range = match restrict {
        Restrict::All => 0..store.n_classes(),
        Restrict::NovelOnly => store.novel_ids(),
    };
    let offset = range.start;
    let scores: Vec<f64> = range.map(|c| dot(store.row(c), z)).collect();
    argmax(&scores).map(|i| i + offset)
}

/// Gate threshold from the known-prototype scores of labeled embeddings.
/// `p = 0` disables the gate by returning `-inf`.
pub fn calibrate_threshold(labeled: &Matrix, store: &PrototypeStore, p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidFraction {
            name: "percentile",
            value: p,
        });
    }
    if labeled.rows() == 0 {
        return Err(Error::EmptyScores);
    }
    if p == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let scores: Vec<f64> = labeled.iter_rows().map(|z| store.max_known_score(z)).collect();
    percentile_threshold(&scores, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Every view is judged on its own score.
    #[default]
    PerView,
    /// Both views of a sample share the verdict of the first view.
    PerSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    pub novel_view_ids: Vec<usize>,
    pub rejected_view_ids: Vec<usize>,
    pub threshold: f64,
}

/// A view is novel iff its best known-prototype score is strictly below
/// `threshold`. A threshold of `-inf` marks a disabled gate and passes every
/// view.
pub fn ood_gate(unlabeled: &Matrix, store: &PrototypeStore, threshold: f64, mode: GateMode) -> GateResult {
    let disabled = threshold == f64::NEG_INFINITY;
    let mut novel = Vec::new();
    let mut rejected = Vec::new();
    for i in 0..unlabeled.rows() {
        let judged = match mode {
            GateMode::PerView => i,
            GateMode::PerSample => i & !1,
        };
        if disabled || store.max_known_score(unlabeled.row(judged)) < threshold {
            novel.push(i);
        } else {
            rejected.push(i);
        }
    }
    GateResult {
        novel_view_ids: novel,
        rejected_view_ids: rejected,
        threshold,
    }
}

fn ema_step(store: &mut PrototypeStore, class: usize, z: &[f64], gamma: f64) {
    let mut next: Vec<f64> = store
        .matrix
        .row(class)
        .iter()
        .zip(z)
        .map(|(m, x)| gamma * m + (1.0 - gamma) * x)
        .collect();
    // An exactly cancelling update leaves the prototype in place.
    if l2_normalize_in_place(&mut next).is_ok() {
        store.matrix.row_mut(class).copy_from_slice(&next);
    }
    store.assignment_counts[class] += 1;
}

/// Moving-average update: labeled views move their ground-truth prototype,
/// then gated views move their best novel prototype, each in ascending
/// view order. Novel assignments are taken against the store as it was
/// before this call.
pub fn update_prototypes(
    store: &mut PrototypeStore,
    labeled: &Matrix,
    labels: &[usize],
    unlabeled: &Matrix,
    gated: &[usize],
    gamma: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidFraction {
            name: "gamma",
            value: gamma,
        });
    }
    if labels.len() != labeled.rows() {
        return Err(Error::ShapeMismatch("one label per labeled view".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= store.n_known) {
        return Err(Error::ShapeMismatch(format!("label {bad} is not a known class")));
    }
    let targets: Vec<Option<usize>> = gated
        .iter()
        .map(|&i| pseudo_label(unlabeled.row(i), store, Restrict::NovelOnly))
        .collect();
    for (i, &y) in labels.iter().enumerate() {
        ema_step(store, y, labeled.row(i), gamma);
    }
    for (&i, target) in gated.iter().zip(targets) {
        if let Some(c) = target {
            ema_step(store, c, unlabeled.row(i), gamma);
        }
    }
    Ok(())
}

/// Known-vs-novel score; higher means more in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScore {
    MaxCosine,
    Msp,
    Energy,
}

impl OodScore {
    pub const ALL: [OodScore; 3] = [OodScore::MaxCosine, OodScore::Msp, OodScore::Energy];

    pub fn name(self) -> &'static str {
        match self {
            OodScore::MaxCosine => "max_cosine",
            OodScore::Msp => "msp",
            OodScore::Energy => "energy",
        }
    }
}

impl fmt::Display for OodScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OodScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_cosine" | "max-cosine" => Ok(OodScore::MaxCosine),
            "msp" => Ok(OodScore::Msp),
            "energy" => Ok(OodScore::Energy),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

pub fn ood_score(z: &[f64], store: &PrototypeStore, variant: OodScore, tau: f64) -> Result<f64> {
    if store.n_known() == 0 {
        return Err(Error::EmptyScores);
    }
    let sims: Vec<f64> = store.known_ids().map(|c| dot(store.row(c), z)).collect();
    match variant {
        OodScore::MaxCosine => Ok(sims.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        OodScore::Msp => {
            let probs = softmax(&sims, tau)?;
            Ok(probs.into_iter().fold(f64::NEG_INFINITY, f64::max))
        }
        OodScore::Energy => {
            if !(tau > 0.0) {
                return Err(Error::InvalidTemperature(tau));
            }
            let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
            Ok(tau * log_sum_exp(&logits))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub fpr95: f64,
}

/// AUROC as the probability an in-distribution score exceeds an OOD score
/// (ties count half), and the OOD acceptance rate at the threshold that
/// keeps at least 95% of in-distribution scores.
pub fn detection_metrics(id_scores: &[f64], ood_scores: &[f64]) -> Result<DetectionMetrics> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut id = id_scores.to_vec();
    id.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in ood_scores {
        let below_or_equal = id.partition_point(|&x| x <= s);
        let below = id.partition_point(|&x| x < s);
        wins += (id.len() - below_or_equal) as f64 + 0.5 * (below_or_equal - below) as f64;
    }
    let auroc = wins / (id.len() as f64 * ood_scores.len() as f64);
    let t = percentile_threshold(id_scores, 95.0)?;
    let accepted = ood_scores.iter().filter(|&&s| s >= t).count();
    Ok(DetectionMetrics {
        auroc,
        fpr95: accepted as f64 / ood_scores.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_norm;
    use crate::rng::Stream;

    const E: f64 = std::f64::consts::E;

    fn identity_store(n_known: usize) -> PrototypeStore {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        PrototypeStore::from_parts(m, n_known, vec![0, 0]).unwrap()
    }

    #[test]
    fn random_rows_are_unit_and_seed_dependent() {
        let a = PrototypeStore::random(2, 4, 2, &mut Rng::new(1, Stream::Init)).unwrap();
        let b = PrototypeStore::random(2, 4, 2, &mut Rng::new(2, Stream::Init)).unwrap();
        assert_ne!(a.matrix(), b.matrix());
        for r in a.matrix().iter_rows() {
            assert!((l2_norm(r) - 1.0).abs() < 1e-9);
        }
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(a.row(i), a.row(j));
            }
        }
        assert_eq!(a.known_ids(), 0..2);
        assert_eq!(a.novel_ids(), 2..4);
        assert!(PrototypeStore::random(3, 2, 2, &mut Rng::new(1, Stream::Init)).is_err());
        assert!(PrototypeStore::random(0, 0, 2, &mut Rng::new(1, Stream::Init)).is_err());
    }

    #[test]
    fn pseudo_label_cases() {
        let z = [0.8, 0.6];
        assert_eq!(pseudo_label(&z, &identity_store(1), Restrict::All), Some(0));
        assert_eq!(pseudo_label(&z, &identity_store(1), Restrict::NovelOnly), Some(1));
        assert_eq!(pseudo_label(&z, &identity_store(2), Restrict::NovelOnly), None);
        let tie = [std::f64::consts::FRAC_1_SQRT_2; 2];
        assert_eq!(pseudo_label(&tie, &identity_store(0), Restrict::All), Some(0));
    }

    #[test]
    fn calibration_cases() {
        let store = identity_store(1);
        let labeled = Matrix::from_rows(
            &[0.2f64, 0.4, 0.6, 0.8]
                .iter()
                .map(|&s| vec![s, (1.0 - s * s).sqrt()])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let lambda = calibrate_threshold(&labeled, &store, 50.0).unwrap();
        assert!((lambda - 0.6).abs() < 1e-15);
        let lambda = calibrate_threshold(&labeled, &store, 100.0).unwrap();
        assert!((lambda - 0.2).abs() < 1e-15);
        assert_eq!(calibrate_threshold(&labeled, &store, 0.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(
            calibrate_threshold(&Matrix::zeros(0, 2), &store, 50.0),
            Err(Error::EmptyScores)
        ));
        assert!(calibrate_threshold(&labeled, &store, 101.0).is_err());
    }

    #[test]
    fn gate_cases() {
        let store = identity_store(1);
        let views = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let g = ood_gate(&views, &store, 0.5, GateMode::PerView);
        assert_eq!(g.novel_view_ids, vec![1]);
        assert_eq!(g.rejected_view_ids, vec![0]);

        let g = ood_gate(&views, &store, f64::NEG_INFINITY, GateMode::PerView);
        assert_eq!(g.novel_view_ids, vec![0, 1]);
        assert!(g.rejected_view_ids.is_empty());

        let g = ood_gate(&views, &store, 0.9, GateMode::PerView);
        assert_eq!(g.rejected_view_ids, vec![0]);

        let g = ood_gate(&views, &store, 0.5, GateMode::PerSample);
        assert!(g.novel_view_ids.is_empty());
    }

    #[test]
    fn ema_hand_value_and_fixed_point() {
        let mut store = identity_store(1);
        let labeled = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        update_prototypes(&mut store, &labeled, &[0], &Matrix::zeros(0, 2), &[], 0.9).unwrap();
        let expected = [0.9 / 0.82f64.sqrt(), 0.1 / 0.82f64.sqrt()];
        assert!((store.row(0)[0] - expected[0]).abs() < 1e-15);
        assert!((store.row(0)[1] - expected[1]).abs() < 1e-15);
        assert!((store.row(0)[0] - 0.99388).abs() < 1e-5);
        assert!((store.row(0)[1] - 0.11043).abs() < 1e-5);
        assert_eq!(store.assignment_counts(), &[1, 0]);

        let before = store.row(1).to_vec();
        let u = Matrix::from_rows(&[before.clone()]).unwrap();
        update_prototypes(&mut store, &Matrix::zeros(0, 2), &[], &u, &[0], 0.9).unwrap();
        assert_eq!(store.row(1), &before[..]);
        assert_eq!(store.assignment_counts(), &[1, 1]);
        assert_eq!(store.active_count(), 2);
        store.reset_counts();
        assert_eq!(store.active_count(), 0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut store = identity_store(1);
        let target = [0.6, 0.8];
        let z = Matrix::from_rows(&[target.to_vec()]).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..60 {
            update_prototypes(&mut store, &z, &[0], &Matrix::zeros(0, 2), &[], 0.9).unwrap();
            let angle = dot(store.row(0), &target).clamp(-1.0, 1.0).acos();
            assert!(angle <= 2.0 * 0.9f64.powi(k));
            assert!(angle <= prev);
            prev = angle;
        }
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let mut store = identity_store(1);
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let none = Matrix::zeros(0, 2);
        assert!(update_prototypes(&mut store, &z, &[0], &none, &[], 1.0).is_err());
        assert!(update_prototypes(&mut store, &z, &[1], &none, &[], 0.9).is_err());
    }

    #[test]
    fn score_variants_by_hand() {
        let store = identity_store(2);
        let z = [1.0, 0.0];
        assert_eq!(ood_score(&z, &store, OodScore::MaxCosine, 1.0).unwrap(), 1.0);
        let msp = ood_score(&z, &store, OodScore::Msp, 1.0).unwrap();
        assert!((msp - E / (E + 1.0)).abs() < 1e-15);
        let energy = ood_score(&z, &store, OodScore::Energy, 1.0).unwrap();
        assert!((energy - (E + 1.0).ln()).abs() < 1e-15);
        assert!(matches!("mahalanobis".parse::<OodScore>(), Err(Error::UnknownVariant(_))));
        for v in OodScore::ALL {
            assert_eq!(v.name().parse::<OodScore>().unwrap(), v);
        }
    }

    #[test]
    fn detection_metric_cases() {
        let m = detection_metrics(&[0.9, 0.8, 0.7], &[0.6, 0.5]).unwrap();
        assert_eq!(m.auroc, 1.0);
        assert_eq!(m.fpr95, 0.0);
        let m = detection_metrics(&[0.9, 0.4], &[0.6]).unwrap();
        assert_eq!(m.auroc, 0.5);
        let m = detection_metrics(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!(m.auroc, 0.5);
        assert_eq!(m.fpr95, 1.0);
        assert!(matches!(detection_metrics(&[], &[1.0]), Err(Error::EmptyScores)));
    }
}
