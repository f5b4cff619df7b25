//! Dense tensors, a recording tape for reverse-mode differentiation, and a
//! finite-difference gradient checker.
//!
//! Tensors are generic over [`Real`]: models train in `f32` and gradient
//! checks run the same code in `f64`.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, SubstrateError};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use kernels::{
    causal_mask, layer_norm, log_softmax_rows, masked_attention, softmax_rows, AttnMask, LAYER_NORM_EPS, MASK_BLOCKED,
};
pub use real::{gemm, DType, Real};
pub use tape::{Function, Gradients, Tape, Var};
pub use tensor::Tensor;
