//! Cooperating objectness scorers: per-box most-certain-head selection, a
//! log-determinant divergence term and a hinge cooperation term.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kv::{KvCodec, KvDocument};
use crate::numerics::{bce_with_logit, cholesky, cholesky_inverse, sigmoid, Matrix, Rng};

/// Multipliers on the three loss terms; all 1 in the standard objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpnsLossWeights {
    pub ce: f64,
    pub div: f64,
    pub coop: f64,
}

impl Default for CorpnsLossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            div: 1.0,
            coop: 1.0,
        }
    }
}

/// `N` affine objectness scorers with sigmoid outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnEnsemble {
    /// `N × d`
    pub weights: Matrix,
    pub biases: Vec<f64>,
    /// Lower bound every head should reach on foreground boxes.
    pub coop_threshold: f64,
    /// Tikhonov term added to the score covariance.
    pub div_epsilon: f64,
    pub loss_weights: CorpnsLossWeights,
}

#[derive(Debug, Clone)]
pub struct EnsembleGrads {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl EnsembleGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(&self.biases);
        v
    }
}

/// The three weighted components of the ensemble objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpnsLoss {
    pub ce: f64,
    pub div: f64,
    pub coop: f64,
}

impl CorpnsLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.div + self.coop
    }
}

impl RpnEnsemble {
    pub fn new(heads: usize, dim: usize, init_std: f64, coop_threshold: f64, div_epsilon: f64, rng: &mut Rng) -> Result<Self> {
        if heads < 2 {
            return Err(Error::Argument(format!(
                "an ensemble needs at least 2 heads, got {heads}"
            )));
        }
        if !(coop_threshold > 0.0 && coop_threshold < 1.0) {
            return Err(Error::Argument(format!(
                "cooperation threshold must lie in (0,1), got {coop_threshold}"
            )));
        }
        Ok(Self {
            weights: Matrix::from_vec(heads, dim, rng.normal_vec(heads * dim, init_std))?,
            biases: vec![0.0; heads],
            coop_threshold,
            div_epsilon,
            loss_weights: CorpnsLossWeights::default(),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(&self.biases);
        v
    }

    pub fn load(&mut self, flat: &[f64]) {
        let nw = self.weights.as_slice().len();
        self.weights.as_mut_slice().copy_from_slice(&flat[..nw]);
        let nb = self.biases.len();
        self.biases.copy_from_slice(&flat[nw..nw + nb]);
    }

    /// Raw logits, `B × N`.
    fn logits(&self, proposals: &Matrix) -> Result<Matrix> {
        if proposals.cols() != self.dim() {
            return shape_err(format!(
                "proposals have {} columns, scorers expect {}",
                proposals.cols(),
                self.dim()
            ));
        }
        let mut s = proposals.matmul_t(&self.weights)?;
        for r in 0..s.rows() {
            for (v, b) in s.row_mut(r).iter_mut().zip(&self.biases) {
                *v += b;
            }
        }
        Ok(s)
    }

    /// The score of the selected head for each proposal.
    pub fn selected_scores(&self, proposals: &Matrix) -> Result<Vec<f64>> {
        let f = head_scores(self, proposals)?;
        Ok((0..f.cols())
            .map(|i| {
                let col: Vec<f64> = (0..f.rows()).map(|j| f.get(j, i)).collect();
                col[select_head(&col)]
            })
            .collect())
    }
}

/// `F[j,i] = sigmoid(w_j·x_i + b_j)`, shaped `N × B`.
pub fn head_scores(ensemble: &RpnEnsemble, proposals: &Matrix) -> Result<Matrix> {
    if proposals.rows() == 0 {
        return Err(Error::Argument("no proposals to score".into()));
    }
    let mut s = ensemble.logits(proposals)?.transpose();
    s.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(s)
}

/// The head whose score is furthest from 0.5; ties go to the lowest index.
pub fn select_head(scores: &[f64]) -> usize {
    let mut best = 0;
    let mut best_certainty = f64::NEG_INFINITY;
    for (j, &f) in scores.iter().enumerate() {
        let c = (f - 0.5).abs();
        if c > best_certainty {
            best = j;
            best_certainty = c;
        }
    }
    best
}

/// `−log det(Σ)` with `Σ = (1/B)(F − F̄)(F − F̄)ᵀ + εI` over the `N` heads,
/// and its gradient with respect to `F`.
pub fn divergence_loss(scores: &Matrix, div_epsilon: f64) -> Result<(f64, Matrix)> {
    let (n, b) = (scores.rows(), scores.cols());
    if b < 2 {
        return Err(Error::Argument("divergence needs at least 2 boxes".into()));
    }
    let mut centered = scores.clone();
    for j in 0..n {
        let row = centered.row_mut(j);
        let mean = row.iter().sum::<f64>() / b as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let mut sigma = centered.matmul_t(&centered)?;
    sigma.scale(1.0 / b as f64);
    for j in 0..n {
        sigma.set(j, j, sigma.get(j, j) + div_epsilon);
    }
    let l = cholesky(&sigma).map_err(|e| {
        Error::Numeric(format!("score covariance is not positive definite: {e}"))
    })?;
    let logdet: f64 = (0..n).map(|j| 2.0 * l.get(j, j).ln()).sum();
    if !logdet.is_finite() {
        return Err(Error::Numeric("non-finite log-determinant".into()));
    }
    // d(−log det Σ)/dF = −(2/B) Σ⁻¹ (F − F̄); rows of the product are already centered.
    let mut grad = cholesky_inverse(&l).matmul(&centered)?;
    grad.scale(-2.0 / b as f64);
    Ok((-logdet, grad))
}

/// Mean of `max(0, φ − f)` over every (head, foreground box) pair.
/// No foreground boxes gives zero loss.
pub fn cooperation_loss(fg_scores: &Matrix, threshold: f64) -> (f64, Matrix) {
    let count = fg_scores.as_slice().len();
    let mut grad = Matrix::zeros(fg_scores.rows(), fg_scores.cols());
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for (g, &f) in grad.as_mut_slice().iter_mut().zip(fg_scores.as_slice()) {
        if threshold - f > 0.0 {
            loss += threshold - f;
            *g = -inv;
        }
    }
    (loss * inv, grad)
}

/// Selected-head binary cross-entropy plus the weighted divergence and
/// cooperation terms. Each box's cross-entropy gradient reaches only its
/// selected head.
pub fn corpns_total_loss(
    ensemble: &RpnEnsemble,
    proposals: &Matrix,
    labels: &[bool],
) -> Result<(CorpnsLoss, EnsembleGrads)> {
    let b = proposals.rows();
    if b == 0 || labels.len() != b {
        return Err(Error::Argument("proposals and objectness labels disagree".into()));
    }
    let n = ensemble.num_heads();
    let w = ensemble.loss_weights;
    let logits = ensemble.logits(proposals)?;
    let mut f = logits.transpose();
    f.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));

    // Gradients accumulate on the logits, laid out B × N.
    let mut d_logits = Matrix::zeros(b, n);
    let mut ce = 0.0;
    let mut column = vec![0.0; n];
    for i in 0..b {
        for j in 0..n {
            column[j] = f.get(j, i);
        }
        let js = select_head(&column);
        let (l, g) = bce_with_logit(logits.get(i, js), labels[i]);
        ce += l;
        d_logits.set(i, js, w.ce * g / b as f64);
    }
    ce /= b as f64;

    let mut d_scores = Matrix::zeros(n, b);
    let mut div = 0.0;
    if w.div != 0.0 {
        let (l, g) = divergence_loss(&f, ensemble.div_epsilon)?;
        div = l;
        crate::numerics::axpy(w.div, g.as_slice(), d_scores.as_mut_slice());
    }
    let mut coop = 0.0;
    let fg: Vec<usize> = (0..b).filter(|&i| labels[i]).collect();
    if w.coop != 0.0 && !fg.is_empty() {
        let mut fg_scores = Matrix::zeros(n, fg.len());
        for j in 0..n {
            for (k, &i) in fg.iter().enumerate() {
                fg_scores.set(j, k, f.get(j, i));
            }
        }
        let (l, g) = cooperation_loss(&fg_scores, ensemble.coop_threshold);
        coop = l;
        for j in 0..n {
            for (k, &i) in fg.iter().enumerate() {
                let v = d_scores.get(j, i) + w.coop * g.get(j, k);
                d_scores.set(j, i, v);
            }
        }
    }
    for i in 0..b {
        for j in 0..n {
            let fv = f.get(j, i);
            let v = d_logits.get(i, j) + d_scores.get(j, i) * fv * (1.0 - fv);
            d_logits.set(i, j, v);
        }
    }
    let weights = d_logits.t_matmul(proposals)?;
    let mut biases = vec![0.0; n];
    for r in d_logits.row_iter() {
        biases.iter_mut().zip(r).for_each(|(b, v)| *b += v);
    }
    Ok((
        CorpnsLoss {
            ce: w.ce * ce,
            div: w.div * div,
            coop: w.coop * coop,
        },
        EnsembleGrads { weights, biases },
    ))
}

/// Mean Pearson correlation of head scores across boxes over all head pairs.
pub fn mean_pairwise_correlation(scores: &Matrix) -> f64 {
    let n = scores.rows();
    let b = scores.cols() as f64;
    let centered: Vec<Vec<f64>> = scores
        .row_iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / b;
            r.iter().map(|v| v - m).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..n {
        for c in a + 1..n {
            let cov = crate::numerics::dot(&centered[a], &centered[c]);
            let va = crate::numerics::dot(&centered[a], &centered[a]);
            let vc = crate::numerics::dot(&centered[c], &centered[c]);
            let denom = (va * vc).sqrt();
            total += if denom > 0.0 { cov / denom } else { 1.0 };
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

/// A single affine objectness scorer trained with plain binary cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ObjectnessHead {
    pub fn new(dim: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weights: rng.normal_vec(dim, init_std),
            bias: 0.0,
        }
    }

    pub fn scores(&self, proposals: &Matrix) -> Result<Vec<f64>> {
        if proposals.cols() != self.weights.len() {
            return shape_err("proposal width differs from scorer width");
        }
        Ok(proposals
            .row_iter()
            .map(|x| sigmoid(crate::numerics::dot(x, &self.weights) + self.bias))
            .collect())
    }

    /// Mean BCE and its gradient, weights first then bias.
    pub fn loss_and_grads(&self, proposals: &Matrix, labels: &[bool]) -> Result<(f64, Vec<f64>)> {
        if proposals.rows() == 0 || labels.len() != proposals.rows() {
            return Err(Error::Argument("proposals and objectness labels disagree".into()));
        }
        let inv = 1.0 / proposals.rows() as f64;
        let mut grad = vec![0.0; self.weights.len() + 1];
        let mut loss = 0.0;
        for (x, &y) in proposals.row_iter().zip(labels) {
            let (l, g) = bce_with_logit(crate::numerics::dot(x, &self.weights) + self.bias, y);
            loss += l * inv;
            crate::numerics::axpy(g * inv, x, &mut grad[..self.weights.len()]);
            grad[self.weights.len()] += g * inv;
        }
        Ok((loss, grad))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn load(&mut self, flat: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&flat[..n]);
        self.bias = flat[n];
    }
}

impl KvCodec for RpnEnsemble {
    const KIND: &'static str = "rpn-ensemble";

    fn write_kv(&self, doc: &mut KvDocument) {
        doc.push_matrix("weights", &self.weights);
        doc.push_floats("biases", &self.biases);
        doc.push_floats("coop_threshold", &[self.coop_threshold]);
        doc.push_floats("div_epsilon", &[self.div_epsilon]);
        doc.push_floats(
            "loss_weights",
            &[self.loss_weights.ce, self.loss_weights.div, self.loss_weights.coop],
        );
    }

    fn read_kv(doc: &KvDocument) -> Result<Self> {
        let one = |k: &str| -> Result<f64> {
            doc.get_floats(k)?
                .first()
                .copied()
                .ok_or_else(|| Error::Parse(format!("empty value for '{k}'")))
        };
        let lw = doc.get_floats("loss_weights")?;
        if lw.len() != 3 {
            return Err(Error::Parse("loss_weights needs 3 values".into()));
        }
        Ok(Self {
            weights: doc.get_matrix("weights")?,
            biases: doc.get_floats("biases")?,
            coop_threshold: one("coop_threshold")?,
            div_epsilon: one("div_epsilon")?,
            loss_weights: CorpnsLossWeights {
                ce: lw[0],
                div: lw[1],
                coop: lw[2],
            },
        })
    }
}

impl KvCodec for ObjectnessHead {
    const KIND: &'static str = "objectness-head";

    fn write_kv(&self, doc: &mut KvDocument) {
        doc.push_floats("weights", &self.weights);
        doc.push_floats("bias", &[self.bias]);
    }

    fn read_kv(doc: &KvDocument) -> Result<Self> {
        Ok(Self {
            weights: doc.get_floats("weights")?,
            bias: doc.get_floats("bias")?.first().copied().unwrap_or(0.0),
        })
    }
}

#[cfg(test)]
mod tests;
