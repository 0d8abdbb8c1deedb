use serde::{Deserialize, Serialize};

use crate::encoder::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch budget at which the rate is multiplied by
    /// `decay_factor`.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![0.5, 0.75],
            decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1])
            || self.milestones.iter().any(|m| !(0.0..=1.0).contains(m))
        {
            return Err(Error::InvalidConfig(
                "milestones must be strictly increasing fractions in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum, decoupled from biases for weight decay:
/// `v <- momentum * v + g + wd * theta` (weights only), `theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub total_epochs: usize,
    pub velocity: Gradients,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, total_epochs: usize, mlp: &Mlp) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            total_epochs,
            velocity: Gradients::zeros_like(mlp),
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .config
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * self.total_epochs as f64 - 1e-9)
            .count();
        self.config.lr * self.config.decay_factor.powi(passed as i32)
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients, epoch: usize) -> Result<()> {
        let same = |a: &Gradients| {
            a.w1.rows() == mlp.w1.rows()
                && a.w1.cols() == mlp.w1.cols()
                && a.b1.len() == mlp.b1.len()
                && a.w2.rows() == mlp.w2.rows()
                && a.w2.cols() == mlp.w2.cols()
                && a.b2.len() == mlp.b2.len()
        };
        if !same(grads) || !same(&self.velocity) {
            return Err(Error::ShapeMismatch("gradient shapes do not match parameters".into()));
        }
        let lr = self.lr_at(epoch);
        let momentum = self.config.momentum;
        let wd = self.config.weight_decay;
        let params = mlp.param_blocks_mut();
        let vel = self.velocity.blocks_mut();
        let grad = grads.blocks();
        for ((theta, is_weight), ((v, _), (g, _))) in params.into_iter().zip(vel.into_iter().zip(grad)) {
            let decay = if is_weight { wd } else { 0.0 };
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = momentum * *vi + gi + decay * *t;
                *t -= lr * *vi;
            }
        }
        Ok(())
    }
}
