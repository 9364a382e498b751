//! Dense kernels, the autodiff tape, and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Bound, Grads, Graph, Var};
pub use kernels::{apply_rope, causal_attention, masked_attention, AttnMask};
pub use tensor::{ParamTree, SeqTensor, Tensor};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// Gaussian weights with std `gain / sqrt(fan_in)`.
pub fn init_weight<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<S> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z * std)
    })
}

pub fn init_normal<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z * std)
    })
}
