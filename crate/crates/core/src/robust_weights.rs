//! Simplex weights over domains, updated by exponentiated gradient ascent.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};

/// Largest exponent passed to `exp` in an update.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgConfig {
    /// Group weight step size. Zero pins the weights.
    pub eta_w: f64,
}

impl Default for EgConfig {
    fn default() -> Self {
        Self { eta_w: 0.01 }
    }
}

impl EgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_w >= 0.0 && self.eta_w.is_finite() {
            Ok(())
        } else {
            Err(config_err!("eta_w must be finite and nonnegative, got {}", self.eta_w))
        }
    }
}

impl GroupWeights {
    pub fn uniform(num_domains: usize) -> Result<Self> {
        if num_domains == 0 {
            return Err(config_err!("need at least one domain"));
        }
        Self::from_vec(vec![1.0; num_domains])
    }

    /// Normalises a nonnegative vector with positive mass onto the simplex.
    pub fn from_vec(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(config_err!("need at least one domain"));
        }
        if raw.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Numeric(format!("group weights must be finite and nonnegative: {raw:?}")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Numeric("group weights have no mass".into()));
        }
        Ok(Self { w: raw.into_iter().map(|v| v / total).collect() })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn get(&self, d: usize) -> f64 {
        self.w[d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    /// Independent copy for logging.
    pub fn snapshot(&self) -> Vec<f64> {
        self.w.clone()
    }

    /// Multiplies entry `d` by `exp(eta_w * loss)` and renormalises.
    pub fn eg_update(&self, d: usize, loss: f64, cfg: &EgConfig) -> Result<Self> {
        cfg.validate()?;
        if d >= self.w.len() {
            return Err(shape_err!("domain {d} out of range for {} weights", self.w.len()));
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} for domain {d}")));
        }
        let mut exponent = cfg.eta_w * loss;
        if exponent > MAX_EXPONENT {
            log::warn!("group weight exponent {exponent} for domain {d} clamped to {MAX_EXPONENT}");
            exponent = MAX_EXPONENT;
        }
        if exponent == 0.0 {
            // factor exactly 1: renormalising would only add rounding
            return Ok(self.clone());
        }
        let mut next = self.w.clone();
        next[d] *= exponent.exp();
        let total: f64 = next.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numeric(format!("group weights lost their mass after updating domain {d}")));
        }
        for v in &mut next {
            *v /= total;
        }
        Ok(Self { w: next })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_init() {
        assert_eq!(GroupWeights::uniform(4).unwrap().as_slice(), &[0.25; 4]);
        assert_eq!(GroupWeights::uniform(1).unwrap().as_slice(), &[1.0]);
        let third = GroupWeights::uniform(3).unwrap();
        assert!(third.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-16));
        assert!((third.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(GroupWeights::uniform(0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_loss_is_identity() {
        let w = GroupWeights::from_vec(vec![0.1, 0.2, 0.7]).unwrap();
        for d in 0..3 {
            assert_eq!(w.eg_update(d, 0.0, &EgConfig { eta_w: 0.5 }).unwrap(), w);
        }
    }

    #[test]
    fn hand_evaluated_update() {
        let w = GroupWeights::uniform(2).unwrap();
        let next = w.eg_update(0, 2f64.ln(), &EgConfig { eta_w: 1.0 }).unwrap();
        assert!((next.get(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((next.get(1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn equal_losses_return_to_uniform() {
        let cfg = EgConfig { eta_w: 0.3 };
        let mut w = GroupWeights::uniform(4).unwrap();
        for d in [2, 0, 3, 1] {
            w = w.eg_update(d, 1.7, &cfg).unwrap();
        }
        assert!(w.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn invalid_updates() {
        let w = GroupWeights::uniform(2).unwrap();
        let cfg = EgConfig::default();
        assert!(matches!(w.eg_update(0, f64::NAN, &cfg), Err(Error::Numeric(_))));
        assert!(matches!(w.eg_update(0, f64::INFINITY, &cfg), Err(Error::Numeric(_))));
        assert!(matches!(w.eg_update(2, 1.0, &cfg), Err(Error::Shape(_))));
        assert!(matches!(w.eg_update(0, 1.0, &EgConfig { eta_w: -1.0 }), Err(Error::Config(_))));
    }

    #[test]
    fn huge_exponent_is_clamped() {
        let w = GroupWeights::uniform(2).unwrap();
        let next = w.eg_update(1, 1e6, &EgConfig { eta_w: 1.0 }).unwrap();
        assert!(next.as_slice().iter().all(|v| v.is_finite()));
        assert!((next.get(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snapshots_do_not_alias() {
        let w = GroupWeights::uniform(4).unwrap();
        let snap = w.snapshot();
        assert_eq!(snap, vec![0.25; 4]);
        let next = w.eg_update(0, 3.0, &EgConfig { eta_w: 1.0 }).unwrap();
        assert_eq!(snap, vec![0.25; 4]);
        let later = next.snapshot();
        let _ = next.eg_update(1, 3.0, &EgConfig { eta_w: 1.0 }).unwrap();
        assert_eq!(later, next.snapshot());
        assert_eq!(next.snapshot(), next.snapshot());
    }
}
