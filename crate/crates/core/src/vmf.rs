//! von Mises–Fisher sampling on the unit sphere (Wood's rejection scheme).

use rand_distr::Beta;

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, l2_norm, l2_normalize_in_place};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    mean_direction: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mean_direction: Vec<f64>, kappa: f64) -> Result<Self> {
        if mean_direction.len() < 2 {
            return Err(Error::InvalidDimension(mean_direction.len()));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidConfig(format!("kappa must be >= 0, got {kappa}")));
        }
        let norm = l2_norm(&mean_direction);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mean direction must be unit norm, got {norm}"
            )));
        }
        Ok(Self {
            mean_direction,
            kappa,
        })
    }

    pub fn mean_direction(&self) -> &[f64] {
        &self.mean_direction
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.len()
    }
}

/// Draws `n` unit vectors from vMF(mu, kappa).
pub fn sample_vmf(params: &VmfParams, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let d = params.dim();
    let dm1 = (d - 1) as f64;
    let kappa = params.kappa;
    // b = (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1), written without cancellation.
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("positive shape parameters");
    let mu = params.mean_direction();

    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = loop {
            let z: f64 = rng.sample(&beta);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u = rng.uniform();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        // Tangent direction uniform on the sphere orthogonal to mu.
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let along = dot(&v, mu);
        axpy(-along, mu, &mut v);
        if l2_normalize_in_place(&mut v).is_err() {
            continue;
        }
        let radial = (1.0 - w * w).max(0.0).sqrt();
        let mut x: Vec<f64> = mu.iter().zip(&v).map(|(m, t)| w * m + radial * t).collect();
        l2_normalize_in_place(&mut x).expect("w*mu + sqrt(1-w^2)*v is unit norm");
        out.push(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn mean_direction(samples: &[Vec<f64>]) -> Vec<f64> {
        let d = samples[0].len();
        let mut m = vec![0.0; d];
        for s in samples {
            axpy(1.0 / samples.len() as f64, s, &mut m);
        }
        m
    }

    #[test]
    fn empty_request() {
        let p = VmfParams::new(vec![1.0, 0.0, 0.0], 5.0).unwrap();
        assert!(sample_vmf(&p, 0, &mut Rng::new(0, Stream::Data)).is_empty());
    }

    #[test]
    fn uniform_when_kappa_zero() {
        let mut rng = Rng::new(1, Stream::Data);
        let p = VmfParams::new(vec![0.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        let small = sample_vmf(&p, 200, &mut rng);
        let large = sample_vmf(&p, 20000, &mut rng);
        let n_small = l2_norm(&mean_direction(&small));
        let n_large = l2_norm(&mean_direction(&large));
        assert!(n_large < 0.03, "{n_large}");
        assert!(n_large < n_small);
    }

    #[test]
    fn concentrated_mean_within_two_degrees() {
        let mut rng = Rng::new(2, Stream::Data);
        let mut mu = rng.unit_vector(16);
        l2_normalize_in_place(&mut mu).unwrap();
        let p = VmfParams::new(mu.clone(), 200.0).unwrap();
        let samples = sample_vmf(&p, 10_000, &mut rng);
        let mut m = mean_direction(&samples);
        l2_normalize_in_place(&mut m).unwrap();
        let angle = dot(&m, &mu).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 2.0, "{angle}");
    }

    #[test]
    fn samples_are_unit_norm_for_any_kappa() {
        let mut rng = Rng::new(3, Stream::Data);
        for kappa in [0.0, 0.5, 30.0, 1e3, 1e6] {
            let p = VmfParams::new(rng.unit_vector(8), kappa).unwrap();
            for s in sample_vmf(&p, 200, &mut rng) {
                assert!((l2_norm(&s) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(VmfParams::new(vec![1.0], 1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 0.0], -1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 1.0], 1.0).is_err());
    }
}
