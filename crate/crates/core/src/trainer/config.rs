use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::encoder::OptimizerConfig;
use crate::error::{Error, Result};
use crate::eval::OverallMatching;
use crate::objective::{ActiveTerms, LossWeights};
use crate::prototype::GateMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Threshold from the labeled views of the current step.
    #[default]
    PerBatch,
    /// Threshold from all labeled samples at the start of each epoch.
    PerEpoch,
}

/// All training hyperparameters. Field names double as the keys of the
/// flat `key = value` config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// 0 selects twice the input width.
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// 0 selects the number of classes in the split.
    pub n_prototypes: usize,
    pub weights: LossWeights,
    pub gamma: f64,
    pub percentile: f64,
    /// Replaces `percentile` when set.
    pub p_override: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub drop_l: bool,
    pub drop_u: bool,
    pub drop_n: bool,
    pub use_modified_loss: bool,
    pub calibration: Calibration,
    pub gate_mode: GateMode,
    pub warm_start: bool,
    /// Accuracy is computed every `eval_every` epochs and after the last.
    pub eval_every: usize,
    pub early_stop: bool,
    pub holdout_fraction: f64,
    pub overall_matching: OverallMatching,
    /// Temperature of the softmax and energy OOD scores.
    pub score_temperature: f64,
    pub known_fraction: f64,
    pub label_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_labeled: 64,
            batch_unlabeled: 64,
            hidden_dim: 0,
            embed_dim: 128,
            n_prototypes: 0,
            weights: LossWeights::default(),
            gamma: 0.9,
            percentile: 70.0,
            p_override: None,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            drop_l: false,
            drop_u: false,
            drop_n: false,
            use_modified_loss: false,
            calibration: Calibration::PerBatch,
            gate_mode: GateMode::PerView,
            warm_start: true,
            eval_every: 1,
            early_stop: false,
            holdout_fraction: 0.0,
            overall_matching: OverallMatching::Free,
            score_temperature: 0.1,
            known_fraction: 0.5,
            label_ratio: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "epochs",
        "batch_labeled",
        "batch_unlabeled",
        "hidden_dim",
        "embed_dim",
        "n_prototypes",
        "lambda_n",
        "lambda_l",
        "lambda_u",
        "tau_n",
        "tau_l",
        "tau_u",
        "kl_weight",
        "gamma",
        "percentile",
        "p_override",
        "lr",
        "momentum",
        "weight_decay",
        "lr_milestones",
        "lr_decay",
        "noise_std",
        "mask_prob",
        "drop_l",
        "drop_u",
        "drop_n",
        "use_modified_loss",
        "calibration",
        "gate_mode",
        "warm_start",
        "eval_every",
        "early_stop",
        "holdout_fraction",
        "overall_matching",
        "score_temperature",
        "known_fraction",
        "label_ratio",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_labeled" => self.batch_labeled = parse(key, value)?,
            "batch_unlabeled" => self.batch_unlabeled = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "n_prototypes" => self.n_prototypes = parse(key, value)?,
            "lambda_n" => self.weights.lambda_n = parse(key, value)?,
            "lambda_l" => self.weights.lambda_l = parse(key, value)?,
            "lambda_u" => self.weights.lambda_u = parse(key, value)?,
            "tau_n" => self.weights.tau_n = parse(key, value)?,
            "tau_l" => self.weights.tau_l = parse(key, value)?,
            "tau_u" => self.weights.tau_u = parse(key, value)?,
            "kl_weight" => self.weights.kl_weight = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "percentile" => self.percentile = parse(key, value)?,
            "p_override" => {
                self.p_override = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lr" => self.optimizer.lr = parse(key, value)?,
            "momentum" => self.optimizer.momentum = parse(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "lr_milestones" => self.optimizer.milestones = parse_list(key, value)?,
            "lr_decay" => self.optimizer.decay_factor = parse(key, value)?,
            "noise_std" => self.augment.noise_std = parse(key, value)?,
            "mask_prob" => self.augment.mask_prob = parse(key, value)?,
            "drop_l" => self.drop_l = parse_bool(key, value)?,
            "drop_u" => self.drop_u = parse_bool(key, value)?,
            "drop_n" => self.drop_n = parse_bool(key, value)?,
            "use_modified_loss" => self.use_modified_loss = parse_bool(key, value)?,
            "calibration" => {
                self.calibration = match value {
                    "per_batch" => Calibration::PerBatch,
                    "per_epoch" => Calibration::PerEpoch,
                    _ => return Err(Error::InvalidConfig(format!("unknown calibration {value:?}"))),
                }
            }
            "gate_mode" => {
                self.gate_mode = match value {
                    "per_view" => GateMode::PerView,
                    "per_sample" => GateMode::PerSample,
                    _ => return Err(Error::InvalidConfig(format!("unknown gate_mode {value:?}"))),
                }
            }
            "warm_start" => self.warm_start = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "early_stop" => self.early_stop = parse_bool(key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, value)?,
            "overall_matching" => {
                self.overall_matching = match value {
                    "free" => OverallMatching::Free,
                    "pinned_known" => OverallMatching::PinnedKnown,
                    _ => return Err(Error::InvalidConfig(format!("unknown overall_matching {value:?}"))),
                }
            }
            "score_temperature" => self.score_temperature = parse(key, value)?,
            "known_fraction" => self.known_fraction = parse(key, value)?,
            "label_ratio" => self.label_ratio = parse(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                at: format!("line {}", n + 1),
                message: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                at: format!("line {}", n + 1),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Every key in the flat format, one per line.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let o = &self.optimizer;
        let mut out = String::new();
        let milestones: Vec<String> = o.milestones.iter().map(f64::to_string).collect();
        let calibration = match self.calibration {
            Calibration::PerBatch => "per_batch",
            Calibration::PerEpoch => "per_epoch",
        };
        let gate_mode = match self.gate_mode {
            GateMode::PerView => "per_view",
            GateMode::PerSample => "per_sample",
        };
        let matching = match self.overall_matching {
            OverallMatching::Free => "free",
            OverallMatching::PinnedKnown => "pinned_known",
        };
        let p_override = self.p_override.map_or_else(|| "none".to_string(), |p| p.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_labeled", self.batch_labeled.to_string()),
            ("batch_unlabeled", self.batch_unlabeled.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("n_prototypes", self.n_prototypes.to_string()),
            ("lambda_n", w.lambda_n.to_string()),
            ("lambda_l", w.lambda_l.to_string()),
            ("lambda_u", w.lambda_u.to_string()),
            ("tau_n", w.tau_n.to_string()),
            ("tau_l", w.tau_l.to_string()),
            ("tau_u", w.tau_u.to_string()),
            ("kl_weight", w.kl_weight.to_string()),
            ("gamma", self.gamma.to_string()),
            ("percentile", self.percentile.to_string()),
            ("p_override", p_override),
            ("lr", o.lr.to_string()),
            ("momentum", o.momentum.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("lr_milestones", milestones.join(",")),
            ("lr_decay", o.decay_factor.to_string()),
            ("noise_std", self.augment.noise_std.to_string()),
            ("mask_prob", self.augment.mask_prob.to_string()),
            ("drop_l", self.drop_l.to_string()),
            ("drop_u", self.drop_u.to_string()),
            ("drop_n", self.drop_n.to_string()),
            ("use_modified_loss", self.use_modified_loss.to_string()),
            ("calibration", calibration.to_string()),
            ("gate_mode", gate_mode.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("overall_matching", matching.to_string()),
            ("score_temperature", self.score_temperature.to_string()),
            ("known_fraction", self.known_fraction.to_string()),
            ("label_ratio", self.label_ratio.to_string()),
        ];
        debug_assert_eq!(pairs.len(), Self::KEYS.len());
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Gate percentile after applying the override.
    pub fn effective_percentile(&self) -> f64 {
        self.p_override.unwrap_or(self.percentile)
    }

    pub fn active_terms(&self) -> ActiveTerms {
        ActiveTerms {
            labeled: !self.drop_l,
            unlabeled: !self.drop_u,
            novel: !self.drop_n,
            kl: self.weights.kl_weight > 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_labeled == 0 {
            return Err(Error::InvalidConfig("batch_labeled must be >= 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidFraction {
                name: "gamma",
                value: self.gamma,
            });
        }
        let p = self.effective_percentile();
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("percentile {p} not in [0, 100]")));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidFraction {
                name: "holdout_fraction",
                value: self.holdout_fraction,
            });
        }
        if !(self.score_temperature > 0.0) {
            return Err(Error::InvalidTemperature(self.score_temperature));
        }
        if !(self.augment.noise_std >= 0.0) || !(0.0..1.0).contains(&self.augment.mask_prob) {
            return Err(Error::InvalidConfig("noise_std must be >= 0 and mask_prob in [0, 1)".into()));
        }
        for (name, value) in [("known_fraction", self.known_fraction), ("label_ratio", self.label_ratio)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::InvalidFraction { name, value });
            }
        }
        Ok(())
    }
}
