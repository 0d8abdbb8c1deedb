use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use opencon::data::{
    generate_synthetic, ingest_features, write_binary, write_csv, Dataset, FeatureFormat, SyntheticSpec, S1_SEED,
};
use opencon::eval::theory::{run_verification, Perturbation};
use opencon::eval::{estimate_class_number, KMeansConfig};
use opencon::numeric::{l2_normalize, Matrix};
use opencon::rng::{Rng, Stream};
use opencon::trainer::{
    ablate, checkpoint_config, split_dataset, EpochReport, TrainConfig, TrainSummary, Trainer, Variant,
};

#[derive(Parser)]
#[command(name = "opencon", version, about = "Open-world contrastive learning on feature vectors")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` training config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset file for gen-data, output directory for everything else.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Leave wall-clock fields out of JSON outputs.
    #[arg(long, global = true)]
    no_timestamps: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic vMF mixture and write it as OCFT (or CSV by extension).
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 30.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0.5)]
        max_mean_cosine: f64,
    },
    /// Train on a dataset and report the accuracy triple.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        knobs: Knobs,
        /// Write a checkpoint every N epochs (requires --out).
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the split it was trained on.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per variant of a preset and compare.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        knobs: Knobs,
        #[arg(long, value_enum, default_value_t = Preset::LossComponents)]
        preset: Preset,
    },
    /// Estimate the total number of classes by clustering.
    EstimateK {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        knobs: Knobs,
        /// Inclusive candidate range `lo:hi`.
        #[arg(long, default_value = "2:20")]
        range: String,
        /// Cluster encoder embeddings from this checkpoint instead of raw features.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
    /// Run the numerical theory checks.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, hide = true, default_value_t = PerturbArg::None)]
        perturb: PerturbArg,
    },
}

#[derive(Args)]
struct DataArg {
    /// OCFT or CSV feature file; the S1 benchmark is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Default)]
struct Knobs {
    #[arg(long)]
    known_frac: Option<f64>,
    #[arg(long)]
    label_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Gate percentile; 0 disables the gate.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    n_prototypes: Option<usize>,
    #[arg(long)]
    drop_l: bool,
    #[arg(long)]
    drop_u: bool,
    #[arg(long)]
    drop_n: bool,
    /// Train the known-class term on labeled plus gate-rejected unlabeled views.
    #[arg(long)]
    modified: bool,
    #[arg(long)]
    no_warm_start: bool,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Knobs {
    fn is_empty(&self) -> bool {
        self.known_frac.is_none()
            && self.label_ratio.is_none()
            && self.epochs.is_none()
            && self.p.is_none()
            && self.n_prototypes.is_none()
            && !self.drop_l
            && !self.drop_u
            && !self.drop_n
            && !self.modified
            && !self.no_warm_start
            && self.set.is_empty()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    LossComponents,
    PSweep,
    Modified,
    WarmStart,
}

impl Preset {
    fn variants(self) -> Vec<Variant> {
        match self {
            Preset::LossComponents => Variant::loss_components(),
            Preset::PSweep => Variant::percentile_sweep(),
            Preset::Modified => vec![Variant::Full, Variant::ModifiedLoss],
            Preset::WarmStart => vec![Variant::Full, Variant::NoWarmStart],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::LossComponents => "loss-components",
            Preset::PSweep => "p-sweep",
            Preset::Modified => "modified",
            Preset::WarmStart => "warm-start",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    None,
    AlignmentOffset,
}

/// Bad flags or config; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData {
            classes,
            per_class,
            dim,
            kappa,
            max_mean_cosine,
        } => {
            let spec = SyntheticSpec {
                n_classes: *classes,
                per_class: *per_class,
                dim: *dim,
                kappa: *kappa,
                max_mean_cosine: *max_mean_cosine,
            };
            cmd_gen_data(g, spec)
        }
        Command::Train {
            data,
            knobs,
            checkpoint_every,
            resume,
        } => cmd_train(g, data, knobs, *checkpoint_every, resume.as_deref()),
        Command::Eval { data, checkpoint } => cmd_eval(g, data, checkpoint),
        Command::Ablate { data, knobs, preset } => cmd_ablate(g, data, knobs, *preset),
        Command::EstimateK {
            data,
            knobs,
            range,
            checkpoint,
            restarts,
        } => cmd_estimate_k(g, data, knobs, range, checkpoint.as_deref(), *restarts),
        Command::Verify { trials, perturb } => cmd_verify(g, *trials, *perturb),
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(g: &Global, knobs: &Knobs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        config.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &knobs.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(v) = knobs.known_frac {
        config.known_fraction = v;
    }
    if let Some(v) = knobs.label_ratio {
        config.label_ratio = v;
    }
    if let Some(v) = knobs.epochs {
        config.epochs = v;
    }
    if let Some(v) = knobs.p {
        config.p_override = Some(v);
    }
    if let Some(v) = knobs.n_prototypes {
        config.n_prototypes = v;
    }
    config.drop_l |= knobs.drop_l;
    config.drop_u |= knobs.drop_u;
    config.drop_n |= knobs.drop_n;
    config.use_modified_loss |= knobs.modified;
    if knobs.no_warm_start {
        config.warm_start = false;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn load_dataset(data: &DataArg) -> Result<Dataset> {
    match &data.data {
        Some(path) => ingest_features(path, FeatureFormat::from_path(path))
            .with_context(|| format!("reading dataset {}", path.display())),
        None => Ok(generate_synthetic(
            &SyntheticSpec::benchmark_s1(),
            &mut Rng::new(S1_SEED, Stream::Data),
        )?),
    }
}

fn out_dir(g: &Global) -> Result<Option<&Path>> {
    match &g.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn stamped(g: &Global, mut value: Value) -> Value {
    if !g.no_timestamps {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        value["finished_at"] = json!(secs);
    }
    value
}

/// Prints `value` to stdout and, with an output directory, to `name` in it.
fn emit(dir: Option<&Path>, name: &str, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(dir) = dir {
        let path = dir.join(name);
        fs::write(&path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_epoch(r: &EpochReport) {
    eprintln!(
        "epoch {:>4}  loss {:.4} (l {:.4} u {:.4} n {:.4} kl {:.4})  lambda {}  gated {:.3}  all {} novel {} seen {}  active {}",
        r.epoch,
        r.loss_total,
        r.loss_l,
        r.loss_u,
        r.loss_n,
        r.kl,
        fmt_opt(r.lambda_threshold),
        r.gated_fraction,
        fmt_opt(r.acc_all),
        fmt_opt(r.acc_novel),
        fmt_opt(r.acc_seen),
        r.active_prototypes
    );
}

fn print_summary(s: &TrainSummary) {
    eprintln!("{:<10} {:>8} {:>8} {:>8}", "", "all", "novel", "seen");
    eprintln!("{:<10} {:>8.4} {:>8.4} {:>8.4}", "accuracy", s.acc_all, s.acc_novel, s.acc_seen);
    eprintln!(
        "converged prototypes {}/{} after {} epochs",
        s.converged_classes, s.n_prototypes, s.epochs_run
    );
    if !s.ood.is_empty() {
        eprintln!("{:<12} {:>8} {:>8}", "ood score", "auroc", "fpr95");
        for o in &s.ood {
            eprintln!("{:<12} {:>8.4} {:>8.4}", o.score.name(), o.auroc, o.fpr95);
        }
    }
}

fn cmd_gen_data(g: &Global, spec: SyntheticSpec) -> Result<ExitCode> {
    let out = g.out.as_ref().ok_or_else(|| usage("gen-data requires --out"))?;
    let config = resolve_config(g, &Knobs::default())?;
    if spec.per_class == 0 {
        eprintln!("warning: --per-class 0 writes an empty dataset");
    }
    let dataset = generate_synthetic(&spec, &mut Rng::new(config.seed, Stream::Data))?;
    let format = FeatureFormat::from_path(out);
    match format {
        FeatureFormat::Csv => write_csv(out, &dataset),
        FeatureFormat::Binary => write_binary(out, &dataset),
    }
    .with_context(|| format!("writing {}", out.display()))?;

    let sidecar = stamped(
        g,
        json!({
            "format": match format { FeatureFormat::Csv => "csv", FeatureFormat::Binary => "OCFT" },
            "classes": spec.n_classes,
            "per_class": spec.per_class,
            "dim": spec.dim,
            "kappa": spec.kappa,
            "max_mean_cosine": spec.max_mean_cosine,
            "seed": config.seed,
            "records": dataset.len(),
            "split": {
                "known_fraction": config.known_fraction,
                "label_ratio": config.label_ratio,
            },
        }),
    );
    let mut sidecar_path = out.clone().into_os_string();
    sidecar_path.push(".json");
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&sidecar_path, format!("{text}\n")).context("writing sidecar")?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    g: &Global,
    data: &DataArg,
    knobs: &Knobs,
    checkpoint_every: Option<usize>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    if resume.is_some() && (g.config.is_some() || g.seed.is_some() || !knobs.is_empty()) {
        return Err(usage("--resume takes its config from the checkpoint; drop the other training flags"));
    }
    if checkpoint_every == Some(0) {
        return Err(usage("--checkpoint-every must be >= 1"));
    }
    if checkpoint_every.is_some() && g.out.is_none() {
        return Err(usage("--checkpoint-every requires --out"));
    }
    let dataset = load_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let config = checkpoint_config(&bytes)?;
            let split = split_dataset(&dataset, &config)?;
            Trainer::from_checkpoint(&bytes, split)?
        }
        None => {
            let config = resolve_config(g, knobs)?;
            let split = split_dataset(&dataset, &config)?;
            Trainer::new(config, split)?
        }
    };
    let dir = out_dir(g)?;
    let mut metrics = match dir {
        Some(d) => {
            let path = d.join("metrics.jsonl");
            // A resumed run rewrites the history it carries.
            let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            for r in trainer.reports() {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            Some(f)
        }
        None => None,
    };

    while !trainer.is_finished() {
        let report = trainer.run_epoch()?;
        let line = serde_json::to_string(&report)?;
        match metrics.as_mut() {
            Some(f) => writeln!(f, "{line}")?,
            None => println!("{line}"),
        }
        print_epoch(&report);
        if let (Some(every), Some(d)) = (checkpoint_every, dir) {
            if trainer.epoch() % every == 0 {
                trainer.save_checkpoint(&d.join("checkpoint.ockp"))?;
            }
        }
    }
    if let Some(d) = dir {
        trainer.save_checkpoint(&d.join("checkpoint.ockp"))?;
    }
    let summary = trainer.summary()?;
    print_summary(&summary);
    let value = stamped(
        g,
        json!({
            "command": "train",
            "config": trainer.config(),
            "summary": summary,
        }),
    );
    emit(dir, "summary.json", &value)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(g: &Global, data: &DataArg, checkpoint: &Path) -> Result<ExitCode> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let config = checkpoint_config(&bytes)?;
    let dataset = load_dataset(data)?;
    let split = split_dataset(&dataset, &config)?;
    let trainer = Trainer::from_checkpoint(&bytes, split)?;
    let summary = trainer.summary()?;
    print_summary(&summary);
    let value = stamped(g, json!({ "command": "eval", "summary": summary }));
    emit(out_dir(g)?, "eval.json", &value)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(g: &Global, data: &DataArg, knobs: &Knobs, preset: Preset) -> Result<ExitCode> {
    let config = resolve_config(g, knobs)?;
    let dataset = load_dataset(data)?;
    let split = split_dataset(&dataset, &config)?;
    let rows = ablate(&config, &split, &preset.variants())?;
    eprintln!("{:<14} {:>8} {:>8} {:>8} {:>10}", "variant", "all", "novel", "seen", "converged");
    for r in &rows {
        eprintln!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>10}",
            r.variant, r.acc_all, r.acc_novel, r.acc_seen, r.converged_classes
        );
    }
    let value = stamped(
        g,
        json!({
            "command": "ablate",
            "preset": preset.name(),
            "config": config,
            "rows": rows,
        }),
    );
    emit(out_dir(g)?, "ablation.json", &value)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_range(range: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("--range expects lo:hi with 1 <= lo <= hi, got `{range}`"));
    let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo..=hi).collect())
}

fn cmd_estimate_k(
    g: &Global,
    data: &DataArg,
    knobs: &Knobs,
    range: &str,
    checkpoint: Option<&Path>,
    restarts: usize,
) -> Result<ExitCode> {
    let candidates = parse_range(range)?;
    if restarts == 0 {
        return Err(usage("--restarts must be >= 1"));
    }
    let dataset = load_dataset(data)?;
    let (config, trainer) = match checkpoint {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let config = checkpoint_config(&bytes)?;
            let split = split_dataset(&dataset, &config)?;
            let trainer = Trainer::from_checkpoint(&bytes, split)?;
            (config, Some(trainer))
        }
        None => (resolve_config(g, knobs)?, None),
    };
    let split = split_dataset(&dataset, &config)?;
    let features = |samples: &[opencon::data::Sample]| -> Result<Matrix> {
        let rows = samples
            .iter()
            .map(|s| match &trainer {
                Some(t) => t.mlp().embed(&s.input),
                None => l2_normalize(&s.input),
            })
            .collect::<opencon::error::Result<Vec<_>>>()?;
        Ok(Matrix::from_rows(&rows)?)
    };
    let labeled = features(&split.labeled)?;
    let unlabeled = features(&split.unlabeled)?;
    let labels: Vec<usize> = split.labeled.iter().filter_map(|s| s.true_class).collect();
    let kcfg = KMeansConfig {
        restarts,
        ..KMeansConfig::default()
    };
    let estimate = estimate_class_number(
        &labeled,
        &labels,
        &unlabeled,
        &candidates,
        &kcfg,
        &mut Rng::new(config.seed, Stream::Init),
    )?;
    eprintln!("{:>4} {:>10} {:>10} {:>8}", "k", "labeled", "silhouette", "score");
    for s in &estimate.scores {
        eprintln!(
            "{:>4} {:>10.4} {:>10.4} {:>8.4}",
            s.k, s.labeled_accuracy, s.silhouette, s.score
        );
    }
    eprintln!("estimated classes: {}", estimate.best_k);
    let value = stamped(
        g,
        json!({
            "command": "estimate-k",
            "best_k": estimate.best_k,
            "scores": estimate.scores,
        }),
    );
    emit(out_dir(g)?, "estimate_k.json", &value)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(g: &Global, trials: usize, perturb: PerturbArg) -> Result<ExitCode> {
    let seed = g.seed.unwrap_or(0);
    let perturbation = match perturb {
        PerturbArg::None => Perturbation::None,
        PerturbArg::AlignmentOffset => Perturbation::AlignmentOffset,
    };
    let report = run_verification(trials, seed, perturbation)?;
    let failed: Vec<usize> = report.trials.iter().filter(|t| !t.passed).map(|t| t.trial).collect();
    let worst_margin = report
        .trials
        .iter()
        .map(|t| t.prototype_optimality.worst_margin)
        .fold(f64::INFINITY, f64::min);
    let worst_alignment = report.trials.iter().map(|t| t.alignment.abs_error).fold(0.0, f64::max);
    let worst_identity = report
        .trials
        .iter()
        .map(|t| t.collision_bound.identity_error)
        .fold(0.0, f64::max);
    let min_slack = report
        .trials
        .iter()
        .map(|t| t.collision_bound.jensen_slack)
        .fold(f64::INFINITY, f64::min);

    eprintln!(
        "{} trials, {} failed; removals lowering collision probability: {}/{}",
        report.trials.len(),
        failed.len(),
        report.removals_decreasing_gamma,
        report.trials.len()
    );
    if trials > 0 {
        eprintln!("prototype optimality worst margin   {worst_margin:.3e}");
        eprintln!("alignment identity worst error      {worst_alignment:.3e}");
        eprintln!("collision identity worst error      {worst_identity:.3e}");
        eprintln!("jensen smallest slack               {min_slack:.3e}");
    }
    let finite = |x: f64| if x.is_finite() { json!(x) } else { Value::Null };
    let value = stamped(
        g,
        json!({
            "command": "verify",
            "seed": seed,
            "trials": report.trials.len(),
            "passed": report.passed,
            "failed_trials": failed,
            "removals_decreasing_gamma": report.removals_decreasing_gamma,
            "worst_prototype_margin": finite(worst_margin),
            "worst_alignment_error": finite(worst_alignment),
            "worst_identity_error": finite(worst_identity),
            "min_jensen_slack": finite(min_slack),
        }),
    );
    let dir = out_dir(g)?;
    emit(dir, "verify.json", &value)?;
    if let Some(d) = dir {
        fs::write(d.join("verify_trials.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
