//! Open-world contrastive learning on vector data.
//!
//! An encoder is trained on a labeled pool of known classes and an unlabeled
//! pool mixing known and novel classes. Prototypes on the hypersphere gate
//! unlabeled views as novel, pseudo-label them, and supply the positive sets
//! that pull novel classes into compact clusters.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod objective;
pub mod prototype;
pub mod rng;
pub mod trainer;
pub mod vmf;

pub use error::{Error, Result};
