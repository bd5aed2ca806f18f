//! Dense tensors, kernels and reverse-mode differentiation.
//!
//! Everything here is generic over [`Real`] so the same model code runs in
//! 32-bit for training and 64-bit for gradient checks and spectral analysis.

mod gemm;
pub mod gradcheck;
pub mod kernels;
mod real;
pub mod rng;
pub mod tape;
mod tensor;

pub use gemm::{gemm, MatMut, MatRef};
pub use gradcheck::{grad_check, CoordSample};
pub use kernels::{
    cross_entropy_mean, gelu, matmul, rms_norm, silu, softmax_rows, Activation,
};
pub use real::{DType, Real};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
