use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer, `out = act(input · Wᵀ + b)` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Values retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct AffineCache {
    pub input: Matrix,
    pub preactivation: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

impl Affine {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return shape_err(format!(
                "bias of length {} for {} output units",
                bias.len(),
                weights.rows()
            ));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(output_dim, input_dim),
            bias: vec![0.0; output_dim],
        }
    }

    /// He-style random init.
    pub fn random(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input_dim as f64).sqrt();
        let data = rng.normal_vec(input_dim * output_dim, std);
        Self {
            weights: Matrix::from_vec(output_dim, input_dim, data).expect("finite by construction"),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    pub fn forward(&self, input: &Matrix, activation: Activation) -> Result<(Matrix, AffineCache)> {
        let pre = self.preactivation(input)?;
        let mut out = pre.clone();
        if activation == Activation::Relu {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok((
            out,
            AffineCache {
                input: input.clone(),
                preactivation: pre,
                activation,
            },
        ))
    }

    /// Forward pass without a cache, for inference.
    pub fn apply(&self, input: &Matrix, activation: Activation) -> Result<Matrix> {
        let mut out = self.preactivation(input)?;
        if activation == Activation::Relu {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(out)
    }

    fn preactivation(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.weights.cols() {
            return shape_err(format!(
                "input has {} columns, layer expects {}",
                input.cols(),
                self.weights.cols()
            ));
        }
        let mut pre = input.matmul_t(&self.weights)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }

    /// Backward pass; the ReLU subgradient at zero is zero.
    pub fn backward(&self, cache: &AffineCache, grad_out: &Matrix) -> Result<AffineGrads> {
        if grad_out.rows() != cache.preactivation.rows() || grad_out.cols() != self.output_dim() {
            return shape_err("upstream gradient does not match layer output");
        }
        let mut g = grad_out.clone();
        if cache.activation == Activation::Relu {
            for (gv, pv) in g.as_mut_slice().iter_mut().zip(cache.preactivation.as_slice()) {
                if *pv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let weights = g.t_matmul(&cache.input)?;
        let mut bias = vec![0.0; self.output_dim()];
        for r in g.row_iter() {
            for (b, v) in bias.iter_mut().zip(r) {
                *b += v;
            }
        }
        let input = g.matmul(&self.weights)?;
        Ok(AffineGrads {
            weights,
            bias,
            input,
        })
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(&self.bias);
    }

    /// Reads parameters back in [`Affine::flatten_into`] order; returns the count consumed.
    pub fn load_from(&mut self, flat: &[f64]) -> usize {
        let nw = self.weights.as_slice().len();
        self.weights.as_mut_slice().copy_from_slice(&flat[..nw]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&flat[nw..nw + nb]);
        nw + nb
    }
}

impl AffineGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(&self.bias);
    }
}

/// `max(0, input · Wᵀ + b)` with a cache for [`Affine::backward`].
pub fn affine_relu_forward(
    input: &Matrix,
    weights: &Matrix,
    bias: &[f64],
) -> Result<(Matrix, AffineCache)> {
    let layer = Affine::new(weights.clone(), bias.to_vec())?;
    layer.forward(input, Activation::Relu)
}
