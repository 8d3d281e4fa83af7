//! A small reverse-mode differentiation engine covering exactly what the
//! fingerprinter needs: SAME-padded 2-D convolution, layer normalization, ReLU,
//! ELU, grouped affine maps and row-wise L2 normalization.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] borrows the store, records a
//! forward pass and produces [`Grads`] that are accumulated back into it.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, REL_FLOOR};
pub use params::{ParamId, ParamStore, Parameter, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{same_padding, Grads, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub(crate) use tensor::{gemm, MatView};

use rand::Rng;

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-6;

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of(rng.random_range(-bound..bound)))
}
