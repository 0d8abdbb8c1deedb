//! The training loop: sample, augment, encode, gate, build sets, step the
//! encoder, then move the prototypes. Also evaluation helpers, ablation
//! sweeps, and checkpoint save/resume.

mod checkpoint;
mod config;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, make_split, BatchSampler, Dataset, MultiViewBatch, Sample, SplitDataset, SyntheticSpec, S1_SEED,
};
use crate::encoder::{Gradients, Mlp, Optimizer, Tape};
use crate::error::{Error, Result};
use crate::eval::{accuracy_triple, AccuracyTriple, OverallMatching};
use crate::numeric::{l2_normalize_in_place, Matrix};
use crate::objective::{loss_modified, loss_opencon, uniform_prior, BatchInputs, ObjectiveOutput};
use crate::prototype::{
    calibrate_threshold, detection_metrics, ood_gate, ood_score, pseudo_label, update_prototypes, OodScore,
    PrototypeStore, Restrict,
};
use crate::rng::{Rng, Stream};

pub use checkpoint::{checkpoint_config, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Calibration, TrainConfig};

/// Per-epoch metrics. Losses are means over the steps of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_l: f64,
    pub loss_u: f64,
    pub loss_n: f64,
    pub kl: f64,
    /// Mean gate threshold over the epoch; `None` when the gate is disabled.
    pub lambda_threshold: Option<f64>,
    pub gated_fraction: f64,
    pub acc_all: Option<f64>,
    pub acc_novel: Option<f64>,
    pub acc_seen: Option<f64>,
    pub active_prototypes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub score: OodScore,
    pub auroc: f64,
    pub fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub acc_all: f64,
    pub acc_novel: f64,
    pub acc_seen: f64,
    pub converged_classes: usize,
    pub n_prototypes: usize,
    /// Known-vs-novel separation on the evaluation samples.
    pub ood: Vec<OodReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub mlp: Mlp,
    pub store: PrototypeStore,
    pub reports: Vec<EpochReport>,
    pub summary: TrainSummary,
}

#[derive(Default)]
struct EpochTotals {
    steps: usize,
    total: f64,
    l: f64,
    u: f64,
    n: f64,
    kl: f64,
    lambda_sum: f64,
    lambda_steps: usize,
    gated: usize,
    unlabeled_views: usize,
}

/// Owns all mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    split: SplitDataset,
    eval_samples: Vec<Sample>,
    mlp: Mlp,
    optimizer: Optimizer,
    store: PrototypeStore,
    sampler: BatchSampler,
    data_rng: Rng,
    augment_rng: Rng,
    epoch: usize,
    reports: Vec<EpochReport>,
    stopped_early: bool,
}

fn embed_rows(mlp: &Mlp, inputs: impl Iterator<Item = Vec<f64>>) -> Result<Matrix> {
    let rows = inputs.map(|x| mlp.embed(&x)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, mlp.output_dim()));
    }
    Matrix::from_rows(&rows)
}

fn forward_batch(mlp: &Mlp, batch: &MultiViewBatch) -> Result<(Matrix, Vec<Tape>)> {
    let mut z = Matrix::zeros(batch.len(), mlp.output_dim());
    let mut tapes = Vec::with_capacity(batch.len());
    for (i, view) in batch.views.iter().enumerate() {
        let (e, tape) = mlp.forward(&view.input)?;
        z.row_mut(i).copy_from_slice(&e);
        tapes.push(tape);
    }
    Ok((z, tapes))
}

/// Embeds `samples` and predicts the highest-scoring prototype for each.
pub fn predict(mlp: &Mlp, store: &PrototypeStore, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let z = mlp.embed(&s.input)?;
            Ok(pseudo_label(&z, store, Restrict::All).unwrap_or(0))
        })
        .collect()
}

/// Accuracy triple over the samples that carry ground truth.
pub fn evaluate(
    mlp: &Mlp,
    store: &PrototypeStore,
    samples: &[Sample],
    n_known: usize,
    matching: OverallMatching,
) -> Result<AccuracyTriple> {
    let labeled: Vec<Sample> = samples.iter().filter(|s| s.true_class.is_some()).cloned().collect();
    let preds = predict(mlp, store, &labeled)?;
    let truth: Vec<usize> = labeled.iter().filter_map(|s| s.true_class).collect();
    accuracy_triple(&preds, &truth, n_known, matching)
}

/// Known-vs-novel detection quality of every score variant on samples with
/// ground truth. Empty when either side has no samples.
pub fn ood_reports(
    mlp: &Mlp,
    store: &PrototypeStore,
    samples: &[Sample],
    n_known: usize,
    temperature: f64,
) -> Result<Vec<OodReport>> {
    let mut out = Vec::new();
    if store.n_known() == 0 {
        return Ok(out);
    }
    let embedded: Vec<(Vec<f64>, bool)> = samples
        .iter()
        .filter_map(|s| s.true_class.map(|c| (s, c < n_known)))
        .map(|(s, known)| Ok((mlp.embed(&s.input)?, known)))
        .collect::<Result<_>>()?;
    for score in OodScore::ALL {
        let mut id = Vec::new();
        let mut ood = Vec::new();
        for (z, known) in &embedded {
            let s = ood_score(z, store, score, temperature)?;
            if *known {
                id.push(s);
            } else {
                ood.push(s);
            }
        }
        if id.is_empty() || ood.is_empty() {
            return Ok(Vec::new());
        }
        let m = detection_metrics(&id, &ood)?;
        out.push(OodReport {
            score,
            auroc: m.auroc,
            fpr95: m.fpr95,
        });
    }
    Ok(out)
}

impl Trainer {
    pub fn new(config: TrainConfig, split: SplitDataset) -> Result<Self> {
        config.validate()?;
        let mut data_rng = Rng::new(config.seed, Stream::Data);
        let augment_rng = Rng::new(config.seed, Stream::Augment);
        let mut init_rng = Rng::new(config.seed, Stream::Init);

        let (split, eval_samples) = if config.holdout_fraction > 0.0 {
            split.hold_out(config.holdout_fraction, &mut data_rng)?
        } else {
            let eval = split.unlabeled.clone();
            (split, eval)
        };
        if split.labeled.is_empty() {
            return Err(Error::EmptyLabeledSet);
        }
        let hidden = if config.hidden_dim == 0 { 2 * split.dim } else { config.hidden_dim };
        let mlp = Mlp::new(split.dim, hidden, config.embed_dim, &mut init_rng);
        let n_prototypes = if config.n_prototypes == 0 {
            split.n_classes()
        } else {
            config.n_prototypes
        };
        let store = PrototypeStore::random(split.n_known(), n_prototypes, config.embed_dim, &mut init_rng)?;
        let sampler = BatchSampler::new(&split, config.batch_labeled, config.batch_unlabeled)?;
        let optimizer = Optimizer::new(config.optimizer.clone(), config.epochs, &mlp)?;
        Ok(Self {
            config,
            split,
            eval_samples,
            mlp,
            optimizer,
            store,
            sampler,
            data_rng,
            augment_rng,
            epoch: 0,
            reports: Vec::new(),
            stopped_early: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn store(&self) -> &PrototypeStore {
        &self.store
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    pub fn split(&self) -> &SplitDataset {
        &self.split
    }

    pub fn eval_samples(&self) -> &[Sample] {
        &self.eval_samples
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.stopped_early
    }

    fn step(&mut self, labeled: &MultiViewBatch, unlabeled: &MultiViewBatch, epoch_lambda: Option<f64>, step: usize, totals: &mut EpochTotals) -> Result<()> {
        let (z_l, tapes_l) = forward_batch(&self.mlp, labeled)?;
        let (z_u, tapes_u) = forward_batch(&self.mlp, unlabeled)?;
        let labels: Vec<usize> = labeled
            .views
            .iter()
            .map(|v| v.label.ok_or(Error::EmptyLabeledSet))
            .collect::<Result<_>>()?;

        let p = self.config.effective_percentile();
        let lambda = match epoch_lambda {
            Some(l) => l,
            None => calibrate_threshold(&z_l, &self.store, p)?,
        };
        let gate = ood_gate(&z_u, &self.store, lambda, self.config.gate_mode);
        let pseudo: Vec<usize> = z_u
            .iter_rows()
            .map(|z| pseudo_label(z, &self.store, Restrict::All).unwrap_or(0))
            .collect();
        let prior = uniform_prior(self.store.n_classes());
        let batch = BatchInputs {
            z_l: &z_l,
            labels_l: &labels,
            z_u: &z_u,
            gated: &gate.novel_view_ids,
            pseudo_labels: &pseudo,
            prototypes: self.store.matrix(),
            prior: &prior,
        };
        let terms = self.config.active_terms();
        let out: ObjectiveOutput = if self.config.use_modified_loss {
            loss_modified(&batch, &self.config.weights, terms)?
        } else {
            loss_opencon(&batch, &self.config.weights, terms)?
        };
        if !out.total.is_finite() || !out.grad_l.is_finite() || !out.grad_u.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step,
                detail: format!(
                    "total={} l={} u={} n={} kl={} lambda={} gated={}/{}",
                    out.total,
                    out.loss_l,
                    out.loss_u,
                    out.loss_n,
                    out.kl,
                    lambda,
                    gate.novel_view_ids.len(),
                    z_u.rows()
                ),
            });
        }

        let mut grads = Gradients::zeros_like(&self.mlp);
        for (tape, g) in tapes_l.iter().zip(out.grad_l.iter_rows()) {
            if g.iter().any(|&x| x != 0.0) {
                self.mlp.backward_into(tape, g, &mut grads)?;
            }
        }
        for (tape, g) in tapes_u.iter().zip(out.grad_u.iter_rows()) {
            if g.iter().any(|&x| x != 0.0) {
                self.mlp.backward_into(tape, g, &mut grads)?;
            }
        }
        self.optimizer.step(&mut self.mlp, &grads, self.epoch)?;
        if !self.mlp.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step,
                detail: "encoder parameters became non-finite".into(),
            });
        }
        update_prototypes(
            &mut self.store,
            &z_l,
            &labels,
            &z_u,
            &gate.novel_view_ids,
            self.config.gamma,
        )?;

        totals.steps += 1;
        totals.total += out.total;
        totals.l += out.loss_l;
        totals.u += out.loss_u;
        totals.n += out.loss_n;
        totals.kl += out.kl;
        if lambda.is_finite() {
            totals.lambda_sum += lambda;
            totals.lambda_steps += 1;
        }
        totals.gated += gate.novel_view_ids.len();
        totals.unlabeled_views += z_u.rows();
        Ok(())
    }

    /// Runs one epoch and returns its report.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        self.store.reset_counts();
        self.sampler.start_epoch(&mut self.data_rng);
        let epoch_lambda = match self.config.calibration {
            Calibration::PerBatch => None,
            Calibration::PerEpoch => {
                let z = embed_rows(&self.mlp, self.split.labeled.iter().map(|s| s.input.clone()))?;
                Some(calibrate_threshold(&z, &self.store, self.config.effective_percentile())?)
            }
        };
        let mut totals = EpochTotals::default();
        let mut step = 0;
        while let Some((labeled, unlabeled)) =
            self.sampler
                .sample_batches(&self.split, &mut self.data_rng, &mut self.augment_rng, &self.config.augment)
        {
            self.step(&labeled, &unlabeled, epoch_lambda, step, &mut totals)?;
            step += 1;
        }
        let epoch = self.epoch;
        if epoch == 0 && self.config.warm_start {
            warm_start(&self.mlp, &mut self.store, &self.split)?;
        }
        self.epoch += 1;

        let last = self.epoch >= self.config.epochs;
        let accuracy = if last || self.epoch % self.config.eval_every == 0 {
            Some(self.evaluate()?)
        } else {
            None
        };
        let steps = totals.steps.max(1) as f64;
        let report = EpochReport {
            epoch,
            loss_total: totals.total / steps,
            loss_l: totals.l / steps,
            loss_u: totals.u / steps,
            loss_n: totals.n / steps,
            kl: totals.kl / steps,
            lambda_threshold: (totals.lambda_steps > 0).then(|| totals.lambda_sum / totals.lambda_steps as f64),
            gated_fraction: if totals.unlabeled_views == 0 {
                0.0
            } else {
                totals.gated as f64 / totals.unlabeled_views as f64
            },
            acc_all: accuracy.map(|a| a.all),
            acc_novel: accuracy.map(|a| a.novel),
            acc_seen: accuracy.map(|a| a.seen),
            active_prototypes: self.store.active_count(),
        };
        self.reports.push(report.clone());
        if self.config.early_stop && self.reports.len() > 10 {
            let now = report.loss_total;
            let before = self.reports[self.reports.len() - 11].loss_total;
            if (now - before).abs() < 1e-4 * before.abs().max(f64::MIN_POSITIVE) {
                self.stopped_early = true;
            }
        }
        Ok(report)
    }

    /// Runs the remaining epochs, handing each report to `on_epoch`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochReport) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let report = self.run_epoch()?;
            on_epoch(&report)?;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<AccuracyTriple> {
        evaluate(
            &self.mlp,
            &self.store,
            &self.eval_samples,
            self.split.n_known(),
            self.config.overall_matching,
        )
    }

    pub fn summary(&self) -> Result<TrainSummary> {
        let acc = self.evaluate()?;
        Ok(TrainSummary {
            epochs_run: self.epoch,
            acc_all: acc.all,
            acc_novel: acc.novel,
            acc_seen: acc.seen,
            converged_classes: self.store.active_count(),
            n_prototypes: self.store.n_classes(),
            ood: ood_reports(
                &self.mlp,
                &self.store,
                &self.eval_samples,
                self.split.n_known(),
                self.config.score_temperature,
            )?,
        })
    }

    pub fn into_outcome(self) -> Result<TrainOutcome> {
        let summary = self.summary()?;
        Ok(TrainOutcome {
            mlp: self.mlp,
            store: self.store,
            reports: self.reports,
            summary,
        })
    }
}

/// Sets each known prototype to the normalized mean embedding of its
/// labeled samples.
fn warm_start(mlp: &Mlp, store: &mut PrototypeStore, split: &SplitDataset) -> Result<()> {
    let mut sums = Matrix::zeros(store.n_known(), mlp.output_dim());
    for sample in &split.labeled {
        if let Some(c) = sample.true_class.filter(|&c| c < store.n_known()) {
            let z = mlp.embed(&sample.input)?;
            for (s, x) in sums.row_mut(c).iter_mut().zip(&z) {
                *s += x;
            }
        }
    }
    for c in 0..store.n_known() {
        let mut mean = sums.row(c).to_vec();
        if l2_normalize_in_place(&mut mean).is_ok() {
            store.set_row(c, &mean)?;
        }
    }
    Ok(())
}

/// Known/novel split of `dataset` under the config's fractions, drawn from
/// the data stream at the config seed.
pub fn split_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<SplitDataset> {
    let mut rng = Rng::new(config.seed, Stream::Data);
    make_split(dataset, config.known_fraction, config.label_ratio, &mut rng)
}

/// The S1 benchmark split under `config`.
pub fn benchmark_split(config: &TrainConfig) -> Result<SplitDataset> {
    let dataset = generate_synthetic(&SyntheticSpec::benchmark_s1(), &mut Rng::new(S1_SEED, Stream::Data))?;
    split_dataset(&dataset, config)
}

/// Trains for the configured number of epochs.
pub fn train(config: TrainConfig, split: SplitDataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, split)?;
    trainer.run(|_| Ok(()))?;
    trainer.into_outcome()
}

/// A named configuration change for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Variant {
    Full,
    WithoutLabeled,
    WithoutUnlabeled,
    WithoutNovel,
    ModifiedLoss,
    NoWarmStart,
    Percentile(f64),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::WithoutLabeled => "w/o L_l".into(),
            Variant::WithoutUnlabeled => "w/o L_u".into(),
            Variant::WithoutNovel => "w/o L_n".into(),
            Variant::ModifiedLoss => "modified".into(),
            Variant::NoWarmStart => "no warm start".into(),
            Variant::Percentile(p) => format!("p={p}"),
        }
    }

    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match *self {
            Variant::Full => {}
            Variant::WithoutLabeled => c.drop_l = true,
            Variant::WithoutUnlabeled => c.drop_u = true,
            Variant::WithoutNovel => c.drop_n = true,
            Variant::ModifiedLoss => c.use_modified_loss = true,
            Variant::NoWarmStart => c.warm_start = false,
            Variant::Percentile(p) => c.p_override = Some(p),
        }
        c
    }

    /// Full objective and each single-term removal.
    pub fn loss_components() -> Vec<Variant> {
        vec![
            Variant::Full,
            Variant::WithoutLabeled,
            Variant::WithoutUnlabeled,
            Variant::WithoutNovel,
        ]
    }

    pub fn percentile_sweep() -> Vec<Variant> {
        [0.0, 10.0, 30.0, 50.0, 70.0, 90.0].into_iter().map(Variant::Percentile).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub acc_all: f64,
    pub acc_novel: f64,
    pub acc_seen: f64,
    pub converged_classes: usize,
}

/// One full training run per variant on the same split and seed.
pub fn ablate(config: &TrainConfig, split: &SplitDataset, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let configs: Vec<TrainConfig> = variants.iter().map(|v| v.apply(config)).collect();
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (variant, c) in variants.iter().zip(configs) {
        let outcome = train(c, split.clone())?;
        rows.push(AblationRow {
            variant: variant.name(),
            acc_all: outcome.summary.acc_all,
            acc_novel: outcome.summary.acc_novel,
            acc_seen: outcome.summary.acc_seen,
            converged_classes: outcome.summary.converged_classes,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_split(seed: u64, novel: bool) -> SplitDataset {
        let mut rng = Rng::new(seed, Stream::Data);
        let spec = SyntheticSpec::new(4, 30, 8, 40.0);
        let ds = generate_synthetic(&spec, &mut rng).unwrap();
        let known = if novel { 0.5 } else { 1.0 };
        make_split(&ds, known, 0.5, &mut rng).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_labeled: 8,
            batch_unlabeled: 16,
            embed_dim: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let a = train(small_config(), small_split(1, true)).unwrap();
        let b = train(small_config(), small_split(1, true)).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.mlp, b.mlp);
        assert_eq!(a.reports.len(), 3);
        for r in &a.reports {
            assert!(r.loss_total.is_finite());
            assert!((0.0..=1.0).contains(&r.gated_fraction));
            let w = small_config().weights;
            let sum = w.lambda_l * r.loss_l + w.lambda_u * r.loss_u + w.lambda_n * r.loss_n + w.kl_weight * r.kl;
            assert!((sum - r.loss_total).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_percentile_gates_everything() {
        let cfg = TrainConfig {
            p_override: Some(0.0),
            ..small_config()
        };
        let out = train(cfg, small_split(2, true)).unwrap();
        for r in &out.reports {
            assert_eq!(r.gated_fraction, 1.0);
            assert_eq!(r.lambda_threshold, None);
        }
    }

    #[test]
    fn supervised_only_reduction() {
        let cfg = TrainConfig {
            drop_n: true,
            drop_u: true,
            batch_unlabeled: 0,
            weights: crate::objective::LossWeights {
                kl_weight: 0.0,
                ..Default::default()
            },
            ..small_config()
        };
        let split = small_split(3, false);
        assert!(split.novel_classes.is_empty());
        let out = train(cfg, split).unwrap();
        for r in &out.reports {
            assert_eq!(r.loss_u, 0.0);
            assert_eq!(r.loss_n, 0.0);
            assert_eq!(r.kl, 0.0);
            assert!((r.loss_total - 0.2 * r.loss_l).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_cadence_leaves_gaps() {
        let cfg = TrainConfig {
            eval_every: 2,
            ..small_config()
        };
        let out = train(cfg, small_split(4, true)).unwrap();
        assert!(out.reports[0].acc_all.is_none());
        assert!(out.reports[1].acc_all.is_some());
        assert!(out.reports[2].acc_all.is_some());
    }

    #[test]
    fn ablation_rows() {
        let split = small_split(5, true);
        assert!(ablate(&small_config(), &split, &[]).unwrap().is_empty());
        let rows = ablate(&small_config(), &split, &[Variant::Full, Variant::WithoutNovel]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].variant, "w/o L_n");
        assert_eq!(Variant::loss_components().len(), 4);
        assert_eq!(Variant::percentile_sweep().len(), 6);
    }

    #[test]
    fn too_few_prototypes_is_rejected() {
        let cfg = TrainConfig {
            n_prototypes: 1,
            ..small_config()
        };
        assert!(Trainer::new(cfg, small_split(6, true)).is_err());
    }
}
