//! Dense matrix primitives: SVD, truncated factors, 2-D prefix sums and window search.
//!
//! All reductions accumulate in `f64`.

mod matrix;
mod prefix;
mod svd;

pub use matrix::DenseMatrix;
pub(crate) use matrix::{gemm, MatRef};
pub(crate) use prefix::block_sum;
pub use prefix::{max_sum_window, prefix_sum_2d, PrefixTable, WindowSelection};
pub use svd::{svd, truncated_factors, SvdFactors};
