//! Box-classifier heads and class prototypes.

mod prototypes;

pub use prototypes::PrototypeRegistry;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kv::{KvCodec, KvDocument};
use crate::numerics::{softmax_cross_entropy, Matrix, Rng};
use crate::synthworld::{Batch, Label};

/// Norms below this are floored before cosine normalization.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cosine,
    #[serde(alias = "fc")]
    FullyConnected,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Cosine => "cosine",
            HeadKind::FullyConnected => "fc",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(HeadKind::Cosine),
            "fc" | "fully_connected" => Ok(HeadKind::FullyConnected),
            other => Err(Error::Argument(format!("unknown head kind '{other}'"))),
        }
    }
}

/// Multi-way box classifier with one weight row per class plus a final
/// background row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    /// `(classes + 1) × d`; the last row scores background.
    pub weights: Matrix,
    /// Cosine temperature α; unused by the fully connected kind.
    pub scale: f64,
}

/// Gradients of a mean cross-entropy with respect to head weights and inputs.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weights: Matrix,
    pub inputs: Matrix,
}

fn normalized_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient on unit vectors back through `x ↦ x / max(‖x‖, floor)`.
/// Rows whose norm hit the floor get a zero gradient.
fn unnormalize_grad(grad_unit: &mut Matrix, unit: &Matrix, norms: &[f64]) {
    for r in 0..grad_unit.rows() {
        let u = unit.row(r);
        let g = grad_unit.row_mut(r);
        let n = norms[r];
        if n <= NORM_FLOOR {
            g.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let proj: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        for (gv, uv) in g.iter_mut().zip(u) {
            *gv = (*gv - proj * uv) / n;
        }
    }
}

impl ClassifierHead {
    /// A head over `classes` foreground classes plus background, rows ~ N(0, init_std²).
    pub fn new(kind: HeadKind, classes: usize, dim: usize, scale: f64, init_std: f64, rng: &mut Rng) -> Self {
        let rows = classes + 1;
        let data = rng.normal_vec(rows * dim, init_std);
        Self {
            kind,
            weights: Matrix::from_vec(rows, dim, data).expect("finite init"),
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows() - 1
    }

    pub fn background_row(&self) -> usize {
        self.weights.rows() - 1
    }

    pub fn row_of(&self, label: Label) -> Result<usize> {
        match label {
            Label::Background => Ok(self.background_row()),
            Label::Class(c) if c < self.num_classes() => Ok(c),
            Label::Class(c) => Err(Error::Argument(format!(
                "class {c} has no row in a {}-class head",
                self.num_classes()
            ))),
        }
    }

    /// Inserts `rows` new class rows right before the background row.
    pub fn with_extra_classes(&self, rows: &Matrix) -> Result<ClassifierHead> {
        if rows.cols() != self.dim() {
            return shape_err("new class rows have the wrong width");
        }
        let classes = Matrix::from_vec(
            self.num_classes(),
            self.dim(),
            self.weights.as_slice()[..self.num_classes() * self.dim()].to_vec(),
        )?;
        let bg = self.weights.select_rows(&[self.background_row()]);
        Ok(ClassifierHead {
            kind: self.kind,
            weights: Matrix::vstack(&[&classes, rows, &bg])?,
            scale: self.scale,
        })
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return shape_err(format!(
                "features have {} columns, head expects {}",
                features.cols(),
                self.dim()
            ));
        }
        match self.kind {
            HeadKind::FullyConnected => features.matmul_t(&self.weights),
            HeadKind::Cosine => {
                let (xu, _) = normalized_rows(features);
                let (wu, _) = normalized_rows(&self.weights);
                let mut l = xu.matmul_t(&wu)?;
                l.scale(self.scale);
                Ok(l)
            }
        }
    }

    /// Backpropagates `dL/dlogits` to the weights and the inputs.
    pub fn backward(&self, features: &Matrix, grad_logits: &Matrix) -> Result<HeadGrads> {
        match self.kind {
            HeadKind::FullyConnected => Ok(HeadGrads {
                weights: grad_logits.t_matmul(features)?,
                inputs: grad_logits.matmul(&self.weights)?,
            }),
            HeadKind::Cosine => {
                let (xu, xn) = normalized_rows(features);
                let (wu, wn) = normalized_rows(&self.weights);
                let mut g = grad_logits.clone();
                g.scale(self.scale);
                let mut gx = g.matmul(&wu)?;
                let mut gw = g.t_matmul(&xu)?;
                unnormalize_grad(&mut gx, &xu, &xn);
                unnormalize_grad(&mut gw, &wu, &wn);
                Ok(HeadGrads {
                    weights: gw,
                    inputs: gx,
                })
            }
        }
    }

    /// Mean cross-entropy of `features` against head rows `targets`.
    pub fn loss_and_grads(&self, features: &Matrix, targets: &[usize]) -> Result<(f64, HeadGrads)> {
        let logits = self.logits(features)?;
        let (loss, grad) = softmax_cross_entropy(&logits, targets)?;
        Ok((loss, self.backward(features, &grad)?))
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<(usize, f64)>> {
        let probs = crate::numerics::softmax_rows(&self.logits(features)?);
        Ok(probs
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                (best, row[best])
            })
            .collect())
    }
}

/// Logits of `features` under `head`.
pub fn head_logits(head: &ClassifierHead, features: &Matrix) -> Result<Matrix> {
    head.logits(features)
}

/// Mean cross-entropy over every example of the batch (background included as
/// a class row), with analytic gradients. Hallucinated examples carry the same
/// weight as real ones.
pub fn head_loss_and_grads(head: &ClassifierHead, batch: &Batch) -> Result<(f64, HeadGrads)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let rows: Vec<&[f64]> = batch.iter().map(|f| f.vector.as_slice()).collect();
    let features = Matrix::from_rows(&rows)?;
    let targets = batch
        .iter()
        .map(|f| head.row_of(f.label))
        .collect::<Result<Vec<_>>>()?;
    head.loss_and_grads(&features, &targets)
}

impl KvCodec for ClassifierHead {
    const KIND: &'static str = "head";

    fn write_kv(&self, doc: &mut KvDocument) {
        doc.push("kind", self.kind.as_str());
        doc.push_floats("scale", &[self.scale]);
        doc.push_matrix("weights", &self.weights);
    }

    fn read_kv(doc: &KvDocument) -> Result<Self> {
        Ok(Self {
            kind: doc.get_str("kind")?.parse()?,
            scale: doc.get_floats("scale")?.first().copied().unwrap_or(1.0),
            weights: doc.get_matrix("weights")?,
        })
    }
}
