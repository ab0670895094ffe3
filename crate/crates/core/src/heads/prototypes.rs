use crate::error::{Error, Result};
use crate::synthworld::{Label, LabeledFeature};

/// Per-class running means. Base classes are frozen once after the base stage;
/// novel classes keep absorbing real and hallucinated examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeRegistry {
    dim: usize,
    base_classes: usize,
    means: Vec<Vec<f64>>,
    counts: Vec<usize>,
    frozen: Vec<bool>,
}

impl PrototypeRegistry {
    pub fn new(classes: usize, base_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            base_classes,
            means: vec![vec![0.0; dim]; classes],
            counts: vec![0; classes],
            frozen: vec![false; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn is_frozen(&self, class: usize) -> bool {
        self.frozen[class]
    }

    /// The prototype, if at least one example has contributed.
    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        (self.counts.get(class).copied().unwrap_or(0) > 0).then(|| self.means[class].as_slice())
    }

    /// `μ ← (n·μ + v) / (n + 1)`
    pub fn update(&mut self, class: usize, vector: &[f64]) -> Result<()> {
        if class >= self.means.len() {
            return Err(Error::Argument(format!("class {class} has no prototype slot")));
        }
        if self.frozen[class] {
            return Err(Error::Contract(format!("prototype of class {class} is frozen")));
        }
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector of dimension {} for {}-dimensional prototypes",
                vector.len(),
                self.dim
            )));
        }
        let n = self.counts[class] as f64;
        for (m, v) in self.means[class].iter_mut().zip(vector) {
            *m = (n * *m + v) / (n + 1.0);
        }
        self.counts[class] += 1;
        Ok(())
    }

    /// Sets every base prototype to the mean of its examples and freezes it.
    pub fn freeze_base_prototypes(&mut self, base_examples: &[LabeledFeature]) -> Result<()> {
        if self.frozen[..self.base_classes].iter().any(|&f| f) {
            return Err(Error::Contract("base prototypes are already frozen".into()));
        }
        let mut sums = vec![vec![0.0; self.dim]; self.base_classes];
        let mut counts = vec![0usize; self.base_classes];
        for ex in base_examples {
            let Label::Class(c) = ex.label else { continue };
            if c >= self.base_classes {
                continue;
            }
            if ex.vector.len() != self.dim {
                return Err(Error::Shape("base example of the wrong dimension".into()));
            }
            sums[c].iter_mut().zip(&ex.vector).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Argument(format!("base class {c} has no examples")));
        }
        for c in 0..self.base_classes {
            let n = counts[c] as f64;
            self.means[c] = sums[c].iter().map(|s| s / n).collect();
            self.counts[c] = counts[c];
            self.frozen[c] = true;
        }
        Ok(())
    }
}
