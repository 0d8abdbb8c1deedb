//! Contrastive objectives and their exact gradients with respect to the
//! embeddings.
//!
//! Every term is an instance of the generalized per-anchor loss
//!
//! ```text
//! L(z; tau, P, N) = -1/|P| sum_{p in P} log( exp(z.p / tau) / sum_{n in N} exp(z.n / tau) )
//! ```
//!
//! differing only in how the positive set `P` and negative set `N` are
//! chosen. Batched terms average over the anchors that have a non-empty
//! positive set; anchors without positives contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, log_sum_exp, softmax, Matrix};

/// Positive and negative index sets for one anchor, indices into the
/// embedding matrix the sets were built for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastSets {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub tau_n: f64,
    pub tau_l: f64,
    pub tau_u: f64,
    pub kl_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_n: 0.1,
            lambda_l: 0.2,
            lambda_u: 1.0,
            tau_n: 0.7,
            tau_l: 0.1,
            tau_u: 0.4,
            kl_weight: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for tau in [self.tau_n, self.tau_l, self.tau_u] {
            if !(tau > 0.0) {
                return Err(Error::InvalidTemperature(tau));
            }
        }
        for (name, w) in [
            ("lambda_n", self.lambda_n),
            ("lambda_l", self.lambda_l),
            ("lambda_u", self.lambda_u),
            ("kl_weight", self.kl_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn check_sets(z: &Matrix, sets: &ContrastSets) -> Result<()> {
    if sets.positives.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    if sets.negatives.is_empty() {
        return Err(Error::ShapeMismatch("negative set is empty".into()));
    }
    let n = z.rows();
    if sets.anchor >= n || sets.positives.iter().chain(&sets.negatives).any(|&j| j >= n) {
        return Err(Error::ShapeMismatch(format!("set index out of range for {n} embeddings")));
    }
    Ok(())
}

/// Alignment term `L_a` and log-partition term `L_b`; `L_a + L_b` is the
/// per-sample loss.
pub fn decompose_alignment(z: &Matrix, sets: &ContrastSets, tau: f64) -> Result<(f64, f64)> {
    check_tau(tau)?;
    check_sets(z, sets)?;
    let anchor = z.row(sets.anchor);
    let mut pos = 0.0;
    for &p in &sets.positives {
        pos += dot(anchor, z.row(p)) / tau;
    }
    let alignment = -pos / sets.positives.len() as f64;
    let logits: Vec<f64> = sets.negatives.iter().map(|&j| dot(anchor, z.row(j)) / tau).collect();
    Ok((alignment, log_sum_exp(&logits)))
}

/// Loss of one anchor and its gradient with respect to every row of `z`.
pub fn per_sample_loss(z: &Matrix, sets: &ContrastSets, tau: f64) -> Result<(f64, Matrix)> {
    let (alignment, partition) = decompose_alignment(z, sets, tau)?;
    let anchor = z.row(sets.anchor).to_vec();
    let logits: Vec<f64> = sets.negatives.iter().map(|&j| dot(&anchor, z.row(j))).collect();
    let weights = softmax(&logits, tau)?;

    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let inv_p = 1.0 / sets.positives.len() as f64;
    let mut add_pair = |j: usize, coef: f64| {
        let other = z.row(j).to_vec();
        axpy(coef, &other, grad.row_mut(sets.anchor));
        axpy(coef, &anchor, grad.row_mut(j));
    };
    for &p in &sets.positives {
        add_pair(p, -inv_p / tau);
    }
    for (&j, w) in sets.negatives.iter().zip(&weights) {
        add_pair(j, w / tau);
    }
    Ok((alignment + partition, grad))
}

/// Positives share the anchor's group id; negatives are every other view.
pub fn build_sets_grouped(groups: &[usize], anchor: usize) -> ContrastSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::with_capacity(groups.len().saturating_sub(1));
    for (j, &g) in groups.iter().enumerate() {
        if j == anchor {
            continue;
        }
        negatives.push(j);
        if g == groups[anchor] {
            positives.push(j);
        }
    }
    ContrastSets {
        anchor,
        positives,
        negatives,
    }
}

/// Supervised sets over a labeled multi-view batch.
pub fn build_sets_supcon(labels: &[usize], anchor: usize) -> ContrastSets {
    build_sets_grouped(labels, anchor)
}

/// Instance sets: the only positive is the other view of the same sample
/// (views `2i` and `2i + 1` are partners).
pub fn build_sets_simclr(n_views: usize, anchor: usize) -> ContrastSets {
    ContrastSets {
        anchor,
        positives: vec![anchor ^ 1],
        negatives: (0..n_views).filter(|&j| j != anchor).collect(),
    }
}

/// Sets over gated novel views grouped by pseudo-label.
pub fn build_sets_novel(pseudo_labels: &[usize], anchor: usize) -> Result<ContrastSets> {
    let sets = build_sets_grouped(pseudo_labels, anchor);
    if sets.positives.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    Ok(sets)
}

/// Batch-averaged term with its embedding gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
    /// Anchors that contributed (non-empty positive set).
    pub anchors: usize,
}

impl LossOutput {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
            anchors: 0,
        }
    }
}

/// Mean per-anchor loss over all rows of `z`, positives defined by equal
/// group ids. Equivalent to averaging [`per_sample_loss`] over
/// [`build_sets_grouped`] for each anchor with a non-empty positive set.
pub fn grouped_contrastive_loss(z: &Matrix, groups: &[usize], tau: f64) -> Result<LossOutput> {
    check_tau(tau)?;
    let n = z.rows();
    if groups.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} group ids for {n} embeddings",
            groups.len()
        )));
    }
    let counts: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && groups[j] == groups[i]).count())
        .collect();
    let anchors = counts.iter().filter(|&&c| c > 0).count();
    if anchors == 0 {
        return Ok(LossOutput::zero(n, z.cols()));
    }
    let gram = z.gram();
    let scale = 1.0 / anchors as f64;
    let mut coef = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut logits = vec![0.0; n - 1];
    for i in 0..n {
        if counts[i] == 0 {
            continue;
        }
        let inv_p = 1.0 / counts[i] as f64;
        let mut k = 0;
        let mut pos = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = gram.get(i, j) / tau;
            logits[k] = s;
            k += 1;
            if groups[j] == groups[i] {
                pos += s;
            }
        }
        let lse = log_sum_exp(&logits);
        total += lse - pos * inv_p;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = gram.get(i, j) / tau;
            let mut c = (s - lse).exp();
            if groups[j] == groups[i] {
                c -= inv_p;
            }
            coef.set(i, j, c * scale / tau);
        }
    }
    // dL/dz_i = sum_j C_ij z_j + sum_j C_ji z_j
    let mut grad = Matrix::zeros(n, z.cols());
    for i in 0..n {
        for j in 0..n {
            let c = coef.get(i, j) + coef.get(j, i);
            if c != 0.0 {
                axpy(c, z.row(j), grad.row_mut(i));
            }
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad,
        anchors,
    })
}

/// Supervised contrastive term over a labeled multi-view batch.
pub fn loss_supcon(z: &Matrix, labels: &[usize], tau: f64) -> Result<LossOutput> {
    grouped_contrastive_loss(z, labels, tau)
}

/// Self-supervised term: each view's positive is its partner view.
pub fn loss_simclr(z: &Matrix, tau: f64) -> Result<LossOutput> {
    if z.rows() % 2 != 0 {
        return Err(Error::ShapeMismatch("multi-view batch has an odd number of views".into()));
    }
    let groups: Vec<usize> = (0..z.rows()).map(|i| i / 2).collect();
    grouped_contrastive_loss(z, &groups, tau)
}

fn gather_rows(z: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), z.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(z.row(r));
    }
    out
}

fn scatter_rows(grad: &Matrix, rows: &[usize], target: &mut Matrix) {
    for (k, &r) in rows.iter().enumerate() {
        axpy(1.0, grad.row(k), target.row_mut(r));
    }
}

/// Novel-class term over the gated subset of an unlabeled batch. `gated`
/// indexes rows of `z_u`; `pseudo_labels` holds one label per row of `z_u`.
/// The returned gradient is shaped like `z_u`.
pub fn loss_novel(
    z_u: &Matrix,
    gated: &[usize],
    pseudo_labels: &[usize],
    tau: f64,
) -> Result<LossOutput> {
    if pseudo_labels.len() != z_u.rows() {
        return Err(Error::ShapeMismatch("one pseudo-label per unlabeled view".into()));
    }
    let sub = gather_rows(z_u, gated);
    let groups: Vec<usize> = gated.iter().map(|&r| pseudo_labels[r]).collect();
    let out = grouped_contrastive_loss(&sub, &groups, tau)?;
    let mut grad = Matrix::zeros(z_u.rows(), z_u.cols());
    scatter_rows(&out.grad, gated, &mut grad);
    Ok(LossOutput {
        value: out.value,
        grad,
        anchors: out.anchors,
    })
}

/// `KL(q || p)` with `0 log 0 = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            acc += qi * (qi / pi).ln();
        }
    }
    acc
}

fn check_prior(prior: &[f64], k: usize) -> Result<()> {
    if prior.len() != k {
        return Err(Error::InvalidPrior(format!("{} entries for {k} prototypes", prior.len())));
    }
    if prior.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidPrior("entries must be positive".into()));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPrior(format!("sums to {sum}")));
    }
    Ok(())
}

pub fn uniform_prior(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// `KL(mean_i softmax(M z_i / tau) || prior)` with gradients through the
/// embeddings only; prototypes are treated as constants.
pub fn kl_regularizer(
    z: &Matrix,
    prototypes: &Matrix,
    tau: f64,
    prior: &[f64],
) -> Result<(f64, Matrix)> {
    check_tau(tau)?;
    let k = prototypes.rows();
    check_prior(prior, k)?;
    let n = z.rows();
    let mut grad = Matrix::zeros(n, z.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut probs = Vec::with_capacity(n);
    let mut mean = vec![0.0; k];
    for i in 0..n {
        let scores: Vec<f64> = (0..k).map(|c| dot(prototypes.row(c), z.row(i))).collect();
        let q = softmax(&scores, tau)?;
        for (m, qc) in mean.iter_mut().zip(&q) {
            *m += qc / n as f64;
        }
        probs.push(q);
    }
    let value = kl_divergence(&mean, prior);
    let log_ratio: Vec<f64> = mean.iter().zip(prior).map(|(m, p)| (m / p).ln()).collect();
    for (i, q) in probs.iter().enumerate() {
        let centered = dot(q, &log_ratio);
        for c in 0..k {
            let ds = q[c] * (log_ratio[c] - centered) / (n as f64 * tau);
            axpy(ds, prototypes.row(c), grad.row_mut(i));
        }
    }
    Ok((value, grad))
}

/// Which terms of the composite objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub labeled: bool,
    pub unlabeled: bool,
    pub novel: bool,
    pub kl: bool,
}

impl Default for ActiveTerms {
    fn default() -> Self {
        Self {
            labeled: true,
            unlabeled: true,
            novel: true,
            kl: true,
        }
    }
}

/// Embeddings and set structure for one training step.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a> {
    pub z_l: &'a Matrix,
    pub labels_l: &'a [usize],
    pub z_u: &'a Matrix,
    /// Rows of `z_u` that passed the novelty gate.
    pub gated: &'a [usize],
    /// Pseudo-label over all prototypes for every row of `z_u`.
    pub pseudo_labels: &'a [usize],
    pub prototypes: &'a Matrix,
    pub prior: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub total: f64,
    pub loss_l: f64,
    pub loss_u: f64,
    pub loss_n: f64,
    pub kl: f64,
    pub grad_l: Matrix,
    pub grad_u: Matrix,
}

fn finish(
    weights: &LossWeights,
    l: Option<(f64, Matrix, Matrix)>,
    u: Option<LossOutput>,
    n: Option<LossOutput>,
    kl: Option<(f64, Matrix)>,
    rows_l: usize,
    rows_u: usize,
    cols: usize,
) -> ObjectiveOutput {
    let mut grad_l = Matrix::zeros(rows_l, cols);
    let mut grad_u = Matrix::zeros(rows_u, cols);
    let mut total = 0.0;
    let mut out = ObjectiveOutput {
        total: 0.0,
        loss_l: 0.0,
        loss_u: 0.0,
        loss_n: 0.0,
        kl: 0.0,
        grad_l: Matrix::zeros(0, 0),
        grad_u: Matrix::zeros(0, 0),
    };
    if let Some((value, gl, gu)) = l {
        out.loss_l = value;
        total += weights.lambda_l * value;
        axpy(weights.lambda_l, gl.as_slice(), grad_l.as_mut_slice());
        axpy(weights.lambda_l, gu.as_slice(), grad_u.as_mut_slice());
    }
    if let Some(u) = u {
        out.loss_u = u.value;
        total += weights.lambda_u * u.value;
        axpy(weights.lambda_u, u.grad.as_slice(), grad_u.as_mut_slice());
    }
    if let Some(n) = n {
        out.loss_n = n.value;
        total += weights.lambda_n * n.value;
        axpy(weights.lambda_n, n.grad.as_slice(), grad_u.as_mut_slice());
    }
    if let Some((value, g)) = kl {
        out.kl = value;
        total += weights.kl_weight * value;
        axpy(weights.kl_weight, g.as_slice(), grad_u.as_mut_slice());
    }
    out.total = total;
    out.grad_l = grad_l;
    out.grad_u = grad_u;
    out
}

fn check_batch(batch: &BatchInputs) -> Result<usize> {
    let cols = batch.z_l.cols().max(batch.z_u.cols());
    if batch.labels_l.len() != batch.z_l.rows() {
        return Err(Error::ShapeMismatch("one label per labeled view".into()));
    }
    if batch.pseudo_labels.len() != batch.z_u.rows() {
        return Err(Error::ShapeMismatch("one pseudo-label per unlabeled view".into()));
    }
    Ok(cols)
}

fn common_terms(
    batch: &BatchInputs,
    weights: &LossWeights,
    terms: ActiveTerms,
) -> Result<(Option<LossOutput>, Option<LossOutput>, Option<(f64, Matrix)>)> {
    let u = if terms.unlabeled {
        Some(loss_simclr(batch.z_u, weights.tau_u)?)
    } else {
        None
    };
    let n = if terms.novel {
        Some(loss_novel(batch.z_u, batch.gated, batch.pseudo_labels, weights.tau_n)?)
    } else {
        None
    };
    let kl = if terms.kl && batch.z_u.rows() > 0 {
        Some(kl_regularizer(batch.z_u, batch.prototypes, weights.tau_n, batch.prior)?)
    } else {
        None
    };
    Ok((u, n, kl))
}

/// `lambda_n L_n + lambda_l L_l + lambda_u L_u + kl_weight KL`; inactive terms
/// contribute zero to both the value and the gradients.
pub fn loss_opencon(
    batch: &BatchInputs,
    weights: &LossWeights,
    terms: ActiveTerms,
) -> Result<ObjectiveOutput> {
    weights.validate()?;
    let cols = check_batch(batch)?;
    let l = if terms.labeled {
        let out = loss_supcon(batch.z_l, batch.labels_l, weights.tau_l)?;
        let empty_u = Matrix::zeros(batch.z_u.rows(), cols);
        Some((out.value, out.grad, empty_u))
    } else {
        None
    };
    let (u, n, kl) = common_terms(batch, weights, terms)?;
    Ok(finish(weights, l, u, n, kl, batch.z_l.rows(), batch.z_u.rows(), cols))
}

/// Variant where the supervised term is replaced by a "known" term over the
/// labeled views plus the unlabeled views the gate rejected, grouped by
/// ground truth (labeled) or pseudo-label (unlabeled). Uses `lambda_l` and
/// `tau_l` for that term.
pub fn loss_modified(
    batch: &BatchInputs,
    weights: &LossWeights,
    terms: ActiveTerms,
) -> Result<ObjectiveOutput> {
    weights.validate()?;
    let cols = check_batch(batch)?;
    let l = if terms.labeled {
        let mut is_gated = vec![false; batch.z_u.rows()];
        for &g in batch.gated {
            is_gated[g] = true;
        }
        let rejected: Vec<usize> = (0..batch.z_u.rows()).filter(|&r| !is_gated[r]).collect();
        let n_l = batch.z_l.rows();
        let mut joined = Matrix::zeros(n_l + rejected.len(), cols);
        let mut groups = Vec::with_capacity(n_l + rejected.len());
        for i in 0..n_l {
            joined.row_mut(i).copy_from_slice(batch.z_l.row(i));
            groups.push(batch.labels_l[i]);
        }
        for (k, &r) in rejected.iter().enumerate() {
            joined.row_mut(n_l + k).copy_from_slice(batch.z_u.row(r));
            groups.push(batch.pseudo_labels[r]);
        }
        let out = grouped_contrastive_loss(&joined, &groups, weights.tau_l)?;
        let mut gl = Matrix::zeros(n_l, cols);
        for i in 0..n_l {
            gl.row_mut(i).copy_from_slice(out.grad.row(i));
        }
        let mut gu = Matrix::zeros(batch.z_u.rows(), cols);
        for (k, &r) in rejected.iter().enumerate() {
            gu.row_mut(r).copy_from_slice(out.grad.row(n_l + k));
        }
        Some((out.value, gl, gu))
    } else {
        None
    };
    let (u, n, kl) = common_terms(batch, weights, terms)?;
    Ok(finish(weights, l, u, n, kl, batch.z_l.rows(), batch.z_u.rows(), cols))
}
