use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Vector-space stand-in for image augmentations: additive Gaussian noise
/// followed by random coordinate masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_prob: 0.1,
        }
    }
}

/// Every coordinate consumes one normal and one uniform draw regardless of
/// the configured strengths, so the stream position depends only on the
/// input length.
pub fn augment(input: &[f64], rng: &mut Rng, config: &AugmentConfig) -> Vec<f64> {
    input
        .iter()
        .map(|&x| {
            let noisy = x + config.noise_std * rng.normal();
            if rng.uniform() < config.mask_prob {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn zero_strength_is_identity() {
        let cfg = AugmentConfig {
            noise_std: 0.0,
            mask_prob: 0.0,
        };
        let x = vec![0.3, -1.2, 5.0];
        assert_eq!(augment(&x, &mut Rng::new(0, Stream::Augment), &cfg), x);
    }

    #[test]
    fn distinct_states_give_distinct_views() {
        let mut rng = Rng::new(1, Stream::Augment);
        let x = vec![0.5; 8];
        let a = augment(&x, &mut rng, &AugmentConfig::default());
        let b = augment(&x, &mut rng, &AugmentConfig::default());
        assert_ne!(a, b);
    }

    #[test]
    fn expected_squared_distortion() {
        // E ||noise||^2 = m * sigma^2 with masking disabled.
        let m = 16;
        let cfg = AugmentConfig {
            noise_std: 0.1,
            mask_prob: 0.0,
        };
        let mut rng = Rng::new(4, Stream::Augment);
        let x = crate::rng::Rng::new(9, Stream::Init).unit_vector(m);
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let y = augment(&x, &mut rng, &cfg);
            total += x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let mean = total / draws as f64;
        let expected = m as f64 * 0.01;
        assert!((mean - expected).abs() < 0.05 * expected, "{mean} vs {expected}");
    }
}
