//! Trainable projection head: a two-layer ReLU MLP with L2-normalized
//! output, exact reverse-mode gradients, and momentum SGD.

mod mlp;
mod optim;

pub use mlp::{Gradients, Mlp, Tape};
pub use optim::{Optimizer, OptimizerConfig};
