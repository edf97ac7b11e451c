//! Numerical core for the VDSNet chest X-ray classifier and its baselines.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! dense [`Tensor`] type, a dynamically recorded [`Tape`] for reverse-mode
//! differentiation, the layer kernels (im2col convolution, pooling, batch
//! norm, dropout), the spatial transformer front block, capsule routing, the
//! declarative model zoo, binary classification metrics and the pure parts of
//! the data pipeline (metadata encoding, splits, augmentation).
//!
//! The crate builds without `std` (an allocator is required). The default
//! `std` feature enables runtime SIMD detection in the GEMM backend and
//! rayon-parallel per-sample convolution kernels. Parallel kernels partition
//! work by sample and reduce in a fixed order, so results are bit-identical
//! regardless of thread count.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod capsule;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod scalar;
pub mod stn;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
