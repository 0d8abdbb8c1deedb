//! Numerical checks of the EM view of the objective and of the
//! class-collision lower bound.
//!
//! Only exact steps are checked: identities are compared to a tolerance and
//! inequalities must hold with nonnegative slack. Approximate steps are
//! reported as values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, log_sum_exp, Matrix};
use crate::objective::{build_sets_grouped, decompose_alignment};
use crate::rng::Rng;
use crate::vmf::{sample_vmf, VmfParams};

fn class_sum(features: &Matrix) -> Vec<f64> {
    let mut sum = vec![0.0; features.cols()];
    for row in features.iter_rows() {
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
    }
    sum
}

/// `ln Gamma(x)` for positive integer or half-integer `x`.
fn ln_gamma_half_integer(x: f64) -> f64 {
    let twice = (2.0 * x).round() as i64;
    debug_assert!(twice >= 1 && ((2.0 * x) - twice as f64).abs() < 1e-12);
    if twice % 2 == 0 {
        (1..twice / 2).map(|j| (j as f64).ln()).sum()
    } else {
        // Gamma(n + 1/2) = sqrt(pi) * prod_{j=1..n} (j - 1/2)
        let n = (twice - 1) / 2;
        0.5 * std::f64::consts::PI.ln() + (1..=n).map(|j| (j as f64 - 0.5).ln()).sum::<f64>()
    }
}

/// `ln I_v(kappa)` for `v = d/2 - 1` by its power series.
fn ln_bessel_i(v: f64, kappa: f64) -> f64 {
    let half_ln = (kappa / 2.0).ln();
    let base = ln_gamma_half_integer(v + 1.0);
    let mut terms = Vec::new();
    let mut ln_fact = 0.0;
    let mut ln_gamma = base;
    for m in 0..2000 {
        if m > 0 {
            ln_fact += (m as f64).ln();
            ln_gamma += (m as f64 + v).ln();
        }
        let t = (2.0 * m as f64 + v) * half_ln - ln_fact - ln_gamma;
        terms.push(t);
        if m as f64 > kappa && t < terms[0] - 40.0 {
            break;
        }
    }
    log_sum_exp(&terms)
}

/// Log normalizer of the von Mises-Fisher density on the unit sphere in
/// `dim` dimensions.
pub fn vmf_log_normalizer(dim: usize, kappa: f64) -> f64 {
    let v = dim as f64 / 2.0 - 1.0;
    v * kappa.ln() - (dim as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln() - ln_bessel_i(v, kappa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeOptimalityReport {
    pub passed: bool,
    /// Smallest `sum phi.mu* - sum phi.u` over all classes and candidates.
    pub worst_margin: f64,
    pub candidates_checked: usize,
    /// Classes whose feature mean vanishes.
    pub degenerate_classes: Vec<usize>,
    /// The log-likelihood and alignment objectives order every configuration
    /// the same way.
    pub ranking_consistent: bool,
}

/// For each class the normalized feature mean must score at least as high
/// as every random unit candidate on `sum_x phi(x).mu`, strictly unless the
/// candidate is parallel to it. Also checks that the hard-assignment vMF
/// log-likelihood and the summed alignment rank random prototype matrices
/// identically.
pub fn verify_prototype_optimality(
    classes: &[Matrix],
    n_candidates: usize,
    n_configs: usize,
    kappa: f64,
    rng: &mut Rng,
) -> Result<PrototypeOptimalityReport> {
    if classes.is_empty() || classes.iter().any(|c| c.rows() == 0) {
        return Err(Error::EmptyEvaluationSet);
    }
    let dim = classes[0].cols();
    let mut worst = f64::INFINITY;
    let mut passed = true;
    let mut degenerate = Vec::new();
    let mut optimal = Vec::with_capacity(classes.len());
    for (c, features) in classes.iter().enumerate() {
        let sum = class_sum(features);
        let norm = l2_norm(&sum);
        if norm < 1e-12 * features.rows() as f64 {
            degenerate.push(c);
            optimal.push(None);
            continue;
        }
        let mu: Vec<f64> = sum.iter().map(|x| x / norm).collect();
        for _ in 0..n_candidates {
            let u = rng.unit_vector(dim);
            let margin = norm - dot(&sum, &u);
            worst = worst.min(margin);
            let parallel = dot(&mu, &u) > 1.0 - 1e-12;
            if margin < 0.0 || (margin == 0.0 && !parallel) {
                passed = false;
            }
        }
        optimal.push(Some(mu));
    }

    // configuration 0 uses the optimal prototypes where defined
    let log_norm = vmf_log_normalizer(dim, kappa);
    let total: usize = classes.iter().map(|c| c.rows()).sum();
    let mut objectives = Vec::with_capacity(n_configs + 1);
    for config in 0..=n_configs {
        let mut alignment = 0.0;
        let mut log_likelihood = 0.0;
        for (c, features) in classes.iter().enumerate() {
            let mu = match (&optimal[c], config) {
                (Some(mu), 0) => mu.clone(),
                _ => rng.unit_vector(dim),
            };
            let prior = (features.rows() as f64 / total as f64).ln();
            for x in features.iter_rows() {
                let s = dot(x, &mu);
                alignment += s;
                log_likelihood += prior + log_norm + kappa * s;
            }
        }
        objectives.push((alignment, log_likelihood));
    }
    let mut ranking_consistent = true;
    for i in 0..objectives.len() {
        for j in 0..i {
            let da = objectives[i].0 - objectives[j].0;
            let dl = objectives[i].1 - objectives[j].1;
            let scale = 1e-9 * (1.0 + objectives[i].1.abs());
            if da.abs() * kappa > scale && (da > 0.0) != (dl > 0.0) {
                ranking_consistent = false;
            }
        }
    }
    Ok(PrototypeOptimalityReport {
        passed: passed && ranking_consistent,
        worst_margin: if worst.is_finite() { worst } else { 0.0 },
        candidates_checked: n_candidates * (classes.len() - degenerate.len()),
        degenerate_classes: degenerate,
        ranking_consistent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEta {
    pub class: usize,
    pub size: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub passed: bool,
    /// Sum of per-anchor alignment terms over positive pairs.
    pub pairwise_sum: f64,
    /// The same quantity through class means and their scaling constants.
    pub class_form: f64,
    pub abs_error: f64,
    pub etas: Vec<ClassEta>,
    /// Classes with a single member have no positive pairs.
    pub degenerate_classes: Vec<usize>,
}

/// Summed alignment term, once through pairwise positives and once as
/// `-sum_c sum_x eta_c phi(x).mu*_c / tau + sum_c |S_c| / ((|S_c| - 1) tau)`
/// with `eta_c = |S_c| / (|S_c| - 1) * |mean_c|`.
pub fn verify_alignment_decomposition(
    features: &Matrix,
    assignments: &[usize],
    tau: f64,
    tolerance: f64,
) -> Result<AlignmentReport> {
    if assignments.len() != features.rows() {
        return Err(Error::ShapeMismatch("one assignment per feature".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let mut classes: Vec<usize> = assignments.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut pairwise = 0.0;
    for i in 0..features.rows() {
        let sets = build_sets_grouped(assignments, i);
        if sets.positives.is_empty() {
            continue;
        }
        pairwise += decompose_alignment(features, &sets, tau)?.0;
    }

    let mut class_form = 0.0;
    let mut etas = Vec::new();
    let mut degenerate = Vec::new();
    for &c in &classes {
        let members: Vec<usize> = (0..features.rows()).filter(|&i| assignments[i] == c).collect();
        let size = members.len();
        if size < 2 {
            degenerate.push(c);
            continue;
        }
        let mut mean = vec![0.0; features.cols()];
        for &i in &members {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x / size as f64;
            }
        }
        let norm = l2_norm(&mean);
        let eta = size as f64 / (size as f64 - 1.0) * norm;
        etas.push(ClassEta { class: c, size, eta });
        if norm > 0.0 {
            let mu: Vec<f64> = mean.iter().map(|m| m / norm).collect();
            for &i in &members {
                class_form -= eta * dot(features.row(i), &mu) / tau;
            }
        }
        class_form += size as f64 / ((size as f64 - 1.0) * tau);
    }
    let abs_error = (pairwise - class_form).abs();
    Ok(AlignmentReport {
        passed: abs_error <= tolerance * (1.0 + pairwise.abs()),
        pairwise_sum: pairwise,
        class_form,
        abs_error,
        etas,
        degenerate_classes: degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionBoundReport {
    /// Probability that two independently drawn samples share a class.
    pub gamma: f64,
    /// Mean-classifier supervised loss conditioned on distinct classes; 0
    /// when only one class is present.
    pub mean_classifier_loss: f64,
    /// Expectation form with the log-partition outside the inner mean.
    pub expectation_form: f64,
    /// Jensen lower bound of `expectation_form`.
    pub jensen_bound: f64,
    pub jensen_slack: f64,
    pub jensen_holds: bool,
    /// `(1 - gamma) / tau * mean_classifier_loss`.
    pub scaled_loss: f64,
    pub identity_error: f64,
    pub identity_holds: bool,
    pub gamma_after_removal: Option<f64>,
    pub removal_decreases_gamma: Option<bool>,
}

impl CollisionBoundReport {
    /// Exact checks only; the direction of the gamma change is reported.
    pub fn passed(&self) -> bool {
        self.jensen_holds && self.identity_holds
    }
}

/// Class-collision probability with class masses proportional to the
/// given sizes.
pub fn collision_probability(sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    sizes.iter().map(|&s| (s as f64 / total as f64).powi(2)).sum()
}

/// Evaluates the collision lower bound on a finite population by exact
/// enumeration. Class masses are proportional to class sizes; `removed`
/// names a class whose removal is simulated for the gamma comparison.
pub fn verify_collision_bound(
    features: &Matrix,
    classes: &[usize],
    tau: f64,
    removed: Option<usize>,
    tolerance: f64,
) -> Result<CollisionBoundReport> {
    if classes.len() != features.rows() {
        return Err(Error::ShapeMismatch("one class per feature".into()));
    }
    if features.rows() == 0 {
        return Err(Error::EmptyEvaluationSet);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let n = features.rows();
    let mut ids: Vec<usize> = classes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|&c| (0..n).filter(|&i| classes[i] == c).collect())
        .collect();
    let mass: Vec<f64> = members.iter().map(|m| m.len() as f64 / n as f64).collect();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let gamma = collision_probability(&sizes);
    let gram = features.gram();

    // negatives are drawn from the whole population: class by mass, then
    // uniformly within the class, which is uniform over all points
    let log_partition: Vec<f64> = (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n).map(|j| gram.get(i, j) / tau).collect();
            log_sum_exp(&logits) - (n as f64).ln()
        })
        .collect();
    let mean_negative: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| gram.get(i, j) / tau).sum::<f64>() / n as f64)
        .collect();

    let mut expectation_form = 0.0;
    let mut jensen_bound = 0.0;
    for (k, group) in members.iter().enumerate() {
        let pairs = (group.len() * group.len()) as f64;
        let mut exact = 0.0;
        let mut bound = 0.0;
        for &x in group {
            for &xp in group {
                let pos = gram.get(x, xp) / tau;
                exact += pos - log_partition[x];
                bound += pos - mean_negative[x];
            }
        }
        expectation_form -= mass[k] * exact / pairs;
        jensen_bound -= mass[k] * bound / pairs;
    }

    let means: Vec<Vec<f64>> = members
        .iter()
        .map(|group| {
            let mut m = vec![0.0; features.cols()];
            for &i in group {
                for (a, x) in m.iter_mut().zip(features.row(i)) {
                    *a += x / group.len() as f64;
                }
            }
            m
        })
        .collect();
    let mut distinct = 0.0;
    for a in 0..ids.len() {
        for b in 0..ids.len() {
            if a != b {
                let gap = dot(&means[a], &means[a]) - dot(&means[a], &means[b]);
                distinct += mass[a] * mass[b] * gap;
            }
        }
    }
    let mean_classifier_loss = if 1.0 - gamma > 0.0 { -distinct / (1.0 - gamma) } else { 0.0 };
    let scaled_loss = (1.0 - gamma) / tau * mean_classifier_loss;
    let identity_error = (scaled_loss - jensen_bound).abs();
    let jensen_slack = expectation_form - jensen_bound;

    let gamma_after_removal = match removed {
        Some(c) => {
            let remaining: Vec<usize> = ids
                .iter()
                .zip(&sizes)
                .filter(|(id, _)| **id != c)
                .map(|(_, &s)| s)
                .collect();
            if remaining.len() == sizes.len() {
                return Err(Error::InvalidConfig(format!("class {c} is not in the population")));
            }
            Some(collision_probability(&remaining))
        }
        None => None,
    };

    Ok(CollisionBoundReport {
        gamma,
        mean_classifier_loss,
        expectation_form,
        jensen_bound,
        jensen_slack,
        jensen_holds: jensen_slack >= -tolerance * (1.0 + jensen_bound.abs()),
        scaled_loss,
        identity_error,
        identity_holds: identity_error <= tolerance * (1.0 + jensen_bound.abs()),
        gamma_after_removal,
        removal_decreases_gamma: gamma_after_removal.map(|g| g < gamma),
    })
}

/// Random clustered population on the sphere: `n_classes` vMF components
/// with random sizes adding up to at most `max_points`.
pub fn random_population(
    n_classes: usize,
    max_points: usize,
    dim: usize,
    kappa: f64,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<usize>)> {
    if n_classes == 0 || max_points < n_classes {
        return Err(Error::InvalidConfig(format!(
            "{n_classes} classes do not fit in {max_points} points"
        )));
    }
    let total = n_classes + rng.below(max_points - n_classes + 1);
    let mut sizes = vec![1usize; n_classes];
    for _ in n_classes..total {
        sizes[rng.below(n_classes)] += 1;
    }
    let mut rows = Vec::with_capacity(total);
    let mut classes = Vec::with_capacity(total);
    for (c, &size) in sizes.iter().enumerate() {
        let params = VmfParams::new(rng.unit_vector(dim), kappa)?;
        rows.extend(sample_vmf(&params, size, rng));
        classes.extend(std::iter::repeat_n(c, size));
    }
    Ok((Matrix::from_rows(&rows)?, classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Perturbation {
    #[default]
    None,
    /// Shifts the class-sum side of the alignment identity so the exact
    /// check must fail.
    AlignmentOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub prototype_optimality: PrototypeOptimalityReport,
    pub alignment: AlignmentReport,
    pub collision_bound: CollisionBoundReport,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub trials: Vec<TrialReport>,
    pub passed: bool,
    /// Trials in which removing a class lowered the collision probability.
    pub removals_decreasing_gamma: usize,
}

/// Tolerance for the exact identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// Runs every check on `trials` random configurations derived from `seed`.
pub fn run_verification(trials: usize, seed: u64, perturbation: Perturbation) -> Result<VerificationReport> {
    let mut reports = Vec::with_capacity(trials);
    for trial in 0..trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut rng = Rng::new(trial_seed, crate::rng::Stream::Theory);

        let (features, classes) = random_population(5, 250, 8, 10.0, &mut rng)?;
        let grouped: Vec<Matrix> = (0..5)
            .map(|c| {
                let rows: Vec<Vec<f64>> = (0..features.rows())
                    .filter(|&i| classes[i] == c)
                    .map(|i| features.row(i).to_vec())
                    .collect();
                Matrix::from_rows(&rows)
            })
            .collect::<Result<_>>()?;
        let prototype_optimality = verify_prototype_optimality(&grouped, 1000, 20, 10.0, &mut rng)?;

        let (features, classes) = random_population(2 + rng.below(3), 40, 6, 5.0, &mut rng)?;
        let mut alignment = verify_alignment_decomposition(&features, &classes, 0.7, IDENTITY_TOLERANCE)?;
        if perturbation == Perturbation::AlignmentOffset {
            alignment.class_form += 1e-3;
            alignment.abs_error = (alignment.pairwise_sum - alignment.class_form).abs();
            alignment.passed = alignment.abs_error <= IDENTITY_TOLERANCE * (1.0 + alignment.pairwise_sum.abs());
        }

        let n_classes = 2 + rng.below(5);
        let (features, classes) = random_population(n_classes, 64, 6, 5.0, &mut rng)?;
        let removed = rng.below(n_classes);
        let collision_bound = verify_collision_bound(&features, &classes, 0.5, Some(removed), IDENTITY_TOLERANCE)?;

        let passed = prototype_optimality.passed && alignment.passed && collision_bound.passed();
        reports.push(TrialReport {
            trial,
            seed: trial_seed,
            prototype_optimality,
            alignment,
            collision_bound,
            passed,
        });
    }
    Ok(VerificationReport {
        passed: reports.iter().all(|r| r.passed),
        removals_decreasing_gamma: reports
            .iter()
            .filter(|r| r.collision_bound.removal_decreases_gamma == Some(true))
            .count(),
        trials: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn antipodal_class_is_degenerate() {
        let class = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let mut rng = Rng::new(1, Stream::Theory);
        let r = verify_prototype_optimality(&[class], 100, 5, 10.0, &mut rng).unwrap();
        assert_eq!(r.degenerate_classes, vec![0]);
        assert_eq!(r.candidates_checked, 0);
    }

    #[test]
    fn identical_features_make_the_feature_optimal() {
        let class = Matrix::from_rows(&vec![vec![1.0, 0.0, 0.0]; 4]).unwrap();
        let mut rng = Rng::new(2, Stream::Theory);
        let r = verify_prototype_optimality(&[class], 1000, 10, 10.0, &mut rng).unwrap();
        assert!(r.passed);
        assert!(r.worst_margin > 0.0);
    }

    #[test]
    fn random_classes_pass_with_positive_margin() {
        let mut rng = Rng::new(3, Stream::Theory);
        let (features, classes) = random_population(5, 250, 8, 10.0, &mut rng).unwrap();
        let grouped: Vec<Matrix> = (0..5)
            .map(|c| {
                let rows: Vec<Vec<f64>> = (0..features.rows())
                    .filter(|&i| classes[i] == c)
                    .map(|i| features.row(i).to_vec())
                    .collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        let r = verify_prototype_optimality(&grouped, 1000, 20, 10.0, &mut rng).unwrap();
        assert!(r.passed && r.ranking_consistent);
        assert!(r.worst_margin > 0.0);
    }

    #[test]
    fn vmf_normalizer_matches_closed_form_in_three_dimensions() {
        // C_3(k) = k / (4 pi sinh k)
        for kappa in [0.5, 2.0, 10.0, 40.0] {
            let expected = (kappa / (4.0 * std::f64::consts::PI * f64::sinh(kappa))).ln();
            assert!((vmf_log_normalizer(3, kappa) - expected).abs() < 1e-10);
        }
        // d = 2: 1 / (2 pi I_0(k)); I_0(1) = 1.2660658777520082
        let expected = -(2.0 * std::f64::consts::PI * 1.266_065_877_752_008_2f64).ln();
        assert!((vmf_log_normalizer(2, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn collinear_classes() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]])
            .unwrap();
        let r = verify_alignment_decomposition(&f, &[0, 0, 0, 1, 1], 0.5, 1e-9).unwrap();
        assert!(r.passed);
        assert_eq!(r.etas[0].eta, 1.5);
        assert_eq!(r.etas[1].eta, 2.0);
        // each anchor aligns perfectly with its positives
        assert!((r.pairwise_sum + 5.0 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_random_classes_satisfy_the_alignment_identity() {
        let mut rng = Rng::new(4, Stream::Theory);
        for _ in 0..20 {
            let (f, c) = random_population(2, 30, 5, 3.0, &mut rng).unwrap();
            let r = verify_alignment_decomposition(&f, &c, 0.7, 1e-9).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn singleton_class_is_flagged() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
        let r = verify_alignment_decomposition(&f, &[0, 1, 1], 0.5, 1e-9).unwrap();
        assert_eq!(r.degenerate_classes, vec![0]);
        assert!(r.passed);
    }

    #[test]
    fn single_class_population() {
        let mut rng = Rng::new(5, Stream::Theory);
        let (f, c) = random_population(1, 10, 4, 5.0, &mut rng).unwrap();
        let r = verify_collision_bound(&f, &c, 0.5, None, 1e-9).unwrap();
        assert_eq!(r.gamma, 1.0);
        assert_eq!(r.scaled_loss, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn uniform_collision_probability() {
        for c in 2..8 {
            let sizes = vec![3; c];
            assert!((collision_probability(&sizes) - 1.0 / c as f64).abs() < 1e-15);
            assert!((collision_probability(&sizes[1..]) - 1.0 / (c - 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn removing_a_dominant_class_lowers_gamma() {
        let sizes = [10, 1, 1, 1, 1];
        assert!(collision_probability(&sizes[1..]) < collision_probability(&sizes));
    }

    #[test]
    fn random_populations_satisfy_the_exact_steps() {
        let mut rng = Rng::new(6, Stream::Theory);
        for _ in 0..30 {
            let (f, c) = random_population(4, 32, 5, 4.0, &mut rng).unwrap();
            let r = verify_collision_bound(&f, &c, 0.5, Some(0), 1e-9).unwrap();
            assert!(r.jensen_slack > 0.0);
            assert!(r.identity_holds, "{r:?}");
        }
    }

    #[test]
    fn perturbation_fails_the_suite() {
        assert!(run_verification(2, 0, Perturbation::None).unwrap().passed);
        assert!(!run_verification(2, 0, Perturbation::AlignmentOffset).unwrap().passed);
        assert!(run_verification(0, 0, Perturbation::None).unwrap().trials.is_empty());
    }
}
