//! Dense linear algebra, layer rules, losses, SGD and gradient checking.

mod gradcheck;
mod layers;
mod loss;
mod matrix;
mod rng;
mod sgd;

pub use gradcheck::grad_check;
pub use layers::{affine_relu_forward, Activation, Affine, AffineCache, AffineGrads};
pub use loss::{
    bce_with_logit, logsumexp, sigmoid, softmax_cross_entropy, softmax_cross_entropy_sum,
    softmax_rows,
};
pub use matrix::{axpy, cholesky, cholesky_inverse, dot, norm, Matrix};
pub use rng::Rng;
pub use sgd::{sgd_step, sgd_update, SgdConfig};
