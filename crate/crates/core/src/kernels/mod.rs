//! Raw numeric kernels over flat buffers. The [`Tape`](crate::Tape) wraps
//! these with shape checks and backward rules.

pub mod conv;
pub mod gemm;
pub(crate) mod par;
pub mod pool;

pub use conv::{Padding, Window2d};
pub use gemm::{gemm, matmul, matmul_reference, MatRef};
