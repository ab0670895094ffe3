use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain SGD with step decay at fixed milestones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub total_iterations: usize,
    pub decay_milestones: Vec<usize>,
    pub decay_ratio: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio < 1.0) {
            return Err(Error::Argument(format!(
                "decay ratio must lie in (0,1), got {}",
                self.decay_ratio
            )));
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("decay milestones must be strictly increasing".into()));
        }
        if self.decay_milestones.last().is_some_and(|&m| m >= self.total_iterations) {
            return Err(Error::Argument(
                "decay milestones must precede the final iteration".into(),
            ));
        }
        Ok(())
    }

    /// `learning_rate × decay_ratio^(#milestones ≤ iteration)`
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self
            .decay_milestones
            .iter()
            .filter(|&&m| m <= iteration)
            .count();
        self.learning_rate * self.decay_ratio.powi(passed as i32)
    }

    /// Keeps the milestone proportions while changing the iteration budget.
    pub fn rescaled(&self, total_iterations: usize) -> SgdConfig {
        let scale = total_iterations as f64 / self.total_iterations as f64;
        let mut milestones: Vec<usize> = self
            .decay_milestones
            .iter()
            .map(|&m| ((m as f64) * scale).round() as usize)
            .filter(|&m| m > 0 && m < total_iterations)
            .collect();
        milestones.dedup();
        SgdConfig {
            total_iterations,
            decay_milestones: milestones,
            ..self.clone()
        }
    }
}

/// One SGD step, returning the updated parameters.
pub fn sgd_step(params: &[f64], grads: &[f64], iteration: usize, config: &SgdConfig) -> Vec<f64> {
    let mut out = params.to_vec();
    sgd_update(&mut out, grads, config.lr_at(iteration));
    out
}

/// In-place `params -= lr · grads`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voc() -> SgdConfig {
        SgdConfig {
            learning_rate: 0.02,
            total_iterations: 8000,
            decay_milestones: vec![2000, 6000],
            decay_ratio: 0.1,
        }
    }

    #[test]
    fn step_decay_schedule() {
        let c = voc();
        c.validate().unwrap();
        assert_eq!(c.lr_at(0), 0.02);
        assert_eq!(c.lr_at(1999), 0.02);
        assert!((c.lr_at(2000) - 0.002).abs() < 1e-15);
        assert!((c.lr_at(6000) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn step_applies_effective_rate() {
        let c = voc();
        let out = sgd_step(&[1.0, -1.0], &[1.0, 2.0], 2000, &c);
        assert!((out[0] - (1.0 - 0.002)).abs() < 1e-15);
        assert!((out[1] - (-1.0 - 0.004)).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = voc();
        c.decay_milestones = vec![6000, 2000];
        assert!(c.validate().is_err());
        let mut c = voc();
        c.decay_milestones = vec![2000, 8000];
        assert!(c.validate().is_err());
        let mut c = voc();
        c.decay_ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rescale_keeps_proportions() {
        let c = voc().rescaled(1600);
        assert_eq!(c.decay_milestones, vec![400, 1200]);
        c.validate().unwrap();
    }
}
