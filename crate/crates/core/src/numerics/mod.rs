//! Dense tensors, counter-based random streams, matrix products and a
//! finite-difference gradient oracle.

mod fd;
mod linalg;
mod rng;
mod tensor;

pub use fd::{finite_difference_grad, max_relative_error};
pub use linalg::{
    add_row_bias, column_sums, gemm_acc, gemm_nt_acc, gemm_tn_acc, init_threads_from_env, matmul,
    matmul_nt, matmul_tn, set_threads, threads,
};
pub use rng::{philox4x32_10, sample_normal, sample_standard_normal, RngStream, StreamPurpose};
pub use tensor::{Scalar, Tensor};
