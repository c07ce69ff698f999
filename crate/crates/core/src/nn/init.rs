use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{hash_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// Standard normal, N(0, 1).
    Normal,
    /// Zero-mean normal with variance 2 / (fan_in + fan_out).
    XavierNormal,
}

/// Weight initialisation: distribution, clipping bound and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub method: InitMethod,
    pub max_abs: f64,
    pub seed: u64,
}

pub const MAX_ABS_RANGE: (f64, f64) = (1e-5, 1.0);

impl InitSpec {
    pub fn new(method: InitMethod, max_abs: f64, seed: u64) -> Result<Self> {
        let spec = InitSpec {
            method,
            max_abs,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = MAX_ABS_RANGE;
        if !(lo..=hi).contains(&self.max_abs) {
            return Err(Error::Config(format!(
                "max_abs {} outside [{lo}, {hi}]",
                self.max_abs
            )));
        }
        Ok(())
    }

    /// Same distribution, seed derived from this one and `key` (one stream per
    /// parameter name).
    pub fn derive(&self, key: u64) -> InitSpec {
        InitSpec {
            seed: hash_seed(&[self.seed, key]),
            ..*self
        }
    }
}

/// Fan-in/fan-out for a weight of the given shape: rows feed columns.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
        [] => (1, 1),
    }
}

pub fn init_tensor(shape: &[usize], spec: &InitSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut t = Tensor::zeros(shape)?;
    let std = match spec.method {
        InitMethod::Normal => 1.0,
        InitMethod::XavierNormal => {
            let (fan_in, fan_out) = fans(shape);
            (2.0 / (fan_in + fan_out) as f64).sqrt()
        }
    };
    let mut rng = Rng::new(spec.seed);
    let bound = spec.max_abs;
    for v in t.data_mut() {
        *v = (rng.normal() * std).clamp(-bound, bound) as f32;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bound_respected() {
        let spec = InitSpec::new(InitMethod::Normal, 1e-5, 1).unwrap();
        let t = init_tensor(&[2, 2], &spec).unwrap();
        assert!(t.data().iter().all(|v| v.abs() as f64 <= 1e-5 + 1e-12));
    }

    #[test]
    fn max_abs_zero_disallowed() {
        assert!(InitSpec::new(InitMethod::Normal, 0.0, 1).is_err());
        assert!(InitSpec::new(InitMethod::Normal, 1.5, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = InitSpec::new(InitMethod::XavierNormal, 0.5, 99).unwrap();
        let a = init_tensor(&[7, 5], &spec).unwrap();
        let b = init_tensor(&[7, 5], &spec).unwrap();
        assert_eq!(a.data(), b.data());
        let c = init_tensor(&[7, 5], &spec.derive(1)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_dimension_is_invalid_shape() {
        let spec = InitSpec::new(InitMethod::Normal, 0.1, 1).unwrap();
        assert!(matches!(init_tensor(&[3, 0], &spec), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn xavier_variance_matches_formula() {
        // 4 x 512x512 draws ~ 1.05M samples at fan_in = fan_out = 512.
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for seed in 0..4 {
            let spec = InitSpec::new(InitMethod::XavierNormal, 1.0, seed).unwrap();
            let t = init_tensor(&[512, 512], &spec).unwrap();
            for &v in t.data() {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        assert!(n >= 1_000_000);
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let expected = 2.0 / 1024.0;
        assert!(((var - expected) / expected).abs() < 0.05, "var {var}");
    }
}
