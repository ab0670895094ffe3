use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvCodec, KvDocument};
use crate::numerics::{dot, Matrix, Rng};

use super::{Label, LabeledFeature, Origin};

/// Generative knobs for a [`SyntheticWorld`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub feature_dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    /// Number of within-class variation modes shared by every class.
    pub modes: usize,
    pub mode_scale: f64,
    pub iso_noise: f64,
    pub proposal_jitter: f64,
    /// Expected norm of the class-specific part of a class mean.
    pub mean_spread: f64,
    pub background_components: usize,
    pub background_std: f64,
    /// Foreground means sit at `+offset` and background means at `−offset`
    /// along a random objectness axis.
    pub objectness_offset: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            base_classes: 15,
            novel_classes: 5,
            modes: 6,
            mode_scale: 1.0,
            iso_noise: 0.1,
            proposal_jitter: 0.15,
            mean_spread: 4.0,
            background_components: 8,
            background_std: 1.0,
            objectness_offset: 2.0,
        }
    }
}

/// Base and novel classes sharing one set of within-class variation modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub feature_dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub class_means: Vec<Vec<f64>>,
    /// `d × M`, orthonormal columns.
    pub modes: Matrix,
    pub mode_scales: Vec<f64>,
    pub iso_noise: f64,
    pub proposal_jitter: f64,
    pub background_means: Vec<Vec<f64>>,
    pub background_weights: Vec<f64>,
    pub background_std: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("{name} must be positive, got {v}")))
    }
}

/// Gram–Schmidt (applied twice) on Gaussian columns.
fn random_orthonormal(d: usize, m: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    while cols.len() < m {
        let mut v = rng.normal_vec(d, 1.0);
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        cols.push(v);
    }
    let mut out = Matrix::zeros(d, m);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            out.set(i, j, x);
        }
    }
    out
}

/// Samples a world. Every class, base or novel, shares the same modes and scales.
pub fn generate_world(params: &WorldParams, rng: &mut Rng) -> Result<SyntheticWorld> {
    let d = params.feature_dim;
    if d == 0 {
        return Err(Error::Argument("feature_dim must be at least 1".into()));
    }
    if params.modes > d {
        return Err(Error::Argument(format!(
            "{} modes do not fit in a {d}-dimensional feature space",
            params.modes
        )));
    }
    if params.base_classes + params.novel_classes == 0 {
        return Err(Error::Argument("world needs at least one class".into()));
    }
    check_positive("mode_scale", params.mode_scale)?;
    check_positive("iso_noise", params.iso_noise)?;
    check_positive("proposal_jitter", params.proposal_jitter)?;
    check_positive("mean_spread", params.mean_spread)?;
    check_positive("background_std", params.background_std)?;
    if params.modes > 0 && params.proposal_jitter >= params.mode_scale {
        return Err(Error::Argument(format!(
            "proposal jitter {} must be narrower than the mode scale {}",
            params.proposal_jitter, params.mode_scale
        )));
    }
    if params.background_components == 0 {
        return Err(Error::Argument("need at least one background component".into()));
    }

    let mut modes_rng = rng.fork("modes");
    let mut means_rng = rng.fork("class-means");
    let mut bg_rng = rng.fork("background");

    // The objectness axis is drawn first so it is fixed by the seed alone.
    let axis = random_orthonormal(d, 1, &mut modes_rng);
    let modes = random_orthonormal(d, params.modes, &mut modes_rng);
    let axis: Vec<f64> = (0..d).map(|i| axis.get(i, 0)).collect();

    let per_coord = params.mean_spread / (d as f64).sqrt();
    let classes = params.base_classes + params.novel_classes;
    let class_means = (0..classes)
        .map(|_| {
            let mut mu = means_rng.normal_vec(d, per_coord);
            mu.iter_mut()
                .zip(&axis)
                .for_each(|(m, a)| *m += params.objectness_offset * a);
            mu
        })
        .collect();
    let background_means = (0..params.background_components)
        .map(|_| {
            let mut mu = bg_rng.normal_vec(d, per_coord);
            mu.iter_mut()
                .zip(&axis)
                .for_each(|(m, a)| *m -= params.objectness_offset * a);
            mu
        })
        .collect();
    let g = params.background_components;
    Ok(SyntheticWorld {
        feature_dim: d,
        base_classes: params.base_classes,
        novel_classes: params.novel_classes,
        class_means,
        modes,
        mode_scales: vec![params.mode_scale; params.modes],
        iso_noise: params.iso_noise,
        proposal_jitter: params.proposal_jitter,
        background_means,
        background_weights: vec![1.0 / g as f64; g],
        background_std: params.background_std,
    })
}

impl SyntheticWorld {
    pub fn num_classes(&self) -> usize {
        self.base_classes + self.novel_classes
    }

    pub fn is_novel(&self, class: usize) -> bool {
        class >= self.base_classes && class < self.num_classes()
    }

    pub fn novel_class_ids(&self) -> std::ops::Range<usize> {
        self.base_classes..self.num_classes()
    }

    /// Largest `|V_i·V_j − δ_ij|` over mode pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.modes.cols();
        let gram = self.modes.t_matmul(&self.modes).expect("square gram");
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - want).abs());
            }
        }
        worst
    }

    /// `V · diag(s²) · Vᵀ + σ_iso² I`
    pub fn class_covariance(&self) -> Matrix {
        let d = self.feature_dim;
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for (k, s) in self.mode_scales.iter().enumerate() {
                    v += self.modes.get(i, k) * self.modes.get(j, k) * s * s;
                }
                if i == j {
                    v += self.iso_noise * self.iso_noise;
                }
                cov.set(i, j, v);
            }
        }
        cov
    }

    /// `μ_c + V·a + η`, `a ~ N(0, diag(s²))`, `η ~ N(0, σ_iso² I)`.
    pub fn sample_instance(&self, class: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        if class >= self.num_classes() {
            return Err(Error::Argument(format!("class {class} does not exist")));
        }
        let mut x = self.class_means[class].clone();
        for (k, s) in self.mode_scales.iter().enumerate() {
            let a = s * rng.normal();
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += self.modes.get(i, k) * a;
            }
        }
        for xi in x.iter_mut() {
            *xi += self.iso_noise * rng.normal();
        }
        Ok(x)
    }

    /// `count` tight jitters of `instance`, standing in for high-IoU RPN boxes.
    pub fn sample_proposals(&self, instance: &[f64], count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::Argument("need at least one proposal".into()));
        }
        if instance.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "instance of dimension {} in a {}-dimensional world",
                instance.len(),
                self.feature_dim
            )));
        }
        Ok((0..count)
            .map(|_| {
                instance
                    .iter()
                    .map(|x| x + self.proposal_jitter * rng.normal())
                    .collect()
            })
            .collect())
    }

    /// Background draws together with the mixture component each came from.
    pub fn sample_background_components(&self, count: usize, rng: &mut Rng) -> Vec<(usize, LabeledFeature)> {
        let total: f64 = self.background_weights.iter().sum();
        (0..count)
            .map(|_| {
                let u = rng.uniform() * total;
                let mut acc = 0.0;
                let mut comp = self.background_weights.len() - 1;
                for (i, w) in self.background_weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = i;
                        break;
                    }
                }
                let vector = self.background_means[comp]
                    .iter()
                    .map(|m| m + self.background_std * rng.normal())
                    .collect();
                (
                    comp,
                    LabeledFeature {
                        vector,
                        label: Label::Background,
                        origin: Origin::Real,
                    },
                )
            })
            .collect()
    }

    pub fn sample_background(&self, count: usize, rng: &mut Rng) -> Vec<LabeledFeature> {
        self.sample_background_components(count, rng)
            .into_iter()
            .map(|(_, f)| f)
            .collect()
    }
}

impl KvCodec for SyntheticWorld {
    const KIND: &'static str = "world";

    fn write_kv(&self, doc: &mut KvDocument) {
        doc.push("feature_dim", self.feature_dim);
        doc.push("base_classes", self.base_classes);
        doc.push("novel_classes", self.novel_classes);
        doc.push_floats("iso_noise", &[self.iso_noise]);
        doc.push_floats("proposal_jitter", &[self.proposal_jitter]);
        doc.push_floats("background_std", &[self.background_std]);
        doc.push_floats("mode_scales", &self.mode_scales);
        doc.push_matrix("modes", &self.modes);
        for (i, m) in self.class_means.iter().enumerate() {
            doc.push_floats(format!("class_mean.{i}"), m);
        }
        doc.push("background_components", self.background_means.len());
        doc.push_floats("background_weights", &self.background_weights);
        for (i, m) in self.background_means.iter().enumerate() {
            doc.push_floats(format!("background_mean.{i}"), m);
        }
    }

    fn read_kv(doc: &KvDocument) -> Result<Self> {
        let scalar = |k: &str| -> Result<f64> {
            doc.get_floats(k)?
                .first()
                .copied()
                .ok_or_else(|| Error::Parse(format!("empty value for '{k}'")))
        };
        let base_classes: usize = doc.get("base_classes")?;
        let novel_classes: usize = doc.get("novel_classes")?;
        let class_means = (0..base_classes + novel_classes)
            .map(|i| doc.get_floats(&format!("class_mean.{i}")))
            .collect::<Result<_>>()?;
        let g: usize = doc.get("background_components")?;
        let background_means = (0..g)
            .map(|i| doc.get_floats(&format!("background_mean.{i}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            feature_dim: doc.get("feature_dim")?,
            base_classes,
            novel_classes,
            class_means,
            modes: doc.get_matrix("modes")?,
            mode_scales: doc.get_floats("mode_scales")?,
            iso_noise: scalar("iso_noise")?,
            proposal_jitter: scalar("proposal_jitter")?,
            background_means,
            background_weights: doc.get_floats("background_weights")?,
            background_std: scalar("background_std")?,
        })
    }
}
