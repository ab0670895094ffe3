use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Per-dimension Gaussian for the hallucinator's noise input, fitted to the
/// base-stage features.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NoiseSpec {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.normal())
            .collect()
    }

    /// All-zero noise; used to isolate the deterministic path.
    pub fn zero(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![0.0; dim],
        }
    }
}

/// Per-dimension sample mean and sample standard deviation (`n − 1`).
pub fn fit_noise_spec<V: AsRef<[f64]>>(features: &[V]) -> Result<NoiseSpec> {
    if features.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 features to fit noise statistics, got {}",
            features.len()
        )));
    }
    let d = features[0].as_ref().len();
    let n = features.len() as f64;
    // Welford keeps the single pass stable.
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for (k, f) in features.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != d {
            return Err(Error::Shape("features of mixed dimension".into()));
        }
        let count = (k + 1) as f64;
        for i in 0..d {
            let delta = f[i] - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (f[i] - mean[i]);
        }
    }
    let std = m2.iter().map(|v| (v / (n - 1.0)).max(0.0).sqrt()).collect();
    Ok(NoiseSpec { mean, std })
}
