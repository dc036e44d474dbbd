//! Matrix products over row-major slices.
//!
//! Every kernel accumulates each output element over the shared dimension in
//! ascending order, so results do not depend on blocking or on how rows are
//! split across threads.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Worker count for row-parallel kernels. `0` keeps everything on the caller's thread.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Reads `GVQ_THREADS` and configures the worker count (unset means 0).
pub fn init_threads_from_env() -> Result<usize> {
    let n = match std::env::var("GVQ_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("GVQ_THREADS must be an integer, got {s:?}")))?,
        Err(_) => 0,
    };
    if n > 1 {
        // A pool may already exist when called twice; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    set_threads(n);
    Ok(n)
}

const PAR_MIN_WORK: usize = 1 << 16;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if threads() > 1 && m * k * n >= PAR_MIN_WORK {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for t in 0..k {
            bt[t * n + j] = b[j * k + t];
        }
    }
    gemm_acc(a, &bt, c, m, k, n);
}

fn check_inner(op: &str, a: &[usize], b: &[usize], ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!("{op}: incompatible shapes {a:?} and {b:?}")))
    }
}

/// `a · b` for 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ok = a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0];
    check_inner("matmul", a.shape(), b.shape(), ok)?;
    let (m, k) = a.dims2()?;
    let n = b.shape()[1];
    let mut c = Tensor::zeros(&[m, n]);
    gemm_acc(a.data(), b.data(), c.data_mut(), m, k, n);
    Ok(c)
}

/// `aᵀ · b` for 2-D tensors.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ok = a.rank() == 2 && b.rank() == 2 && a.shape()[0] == b.shape()[0];
    check_inner("matmul_tn", a.shape(), b.shape(), ok)?;
    let (k, m) = a.dims2()?;
    let n = b.shape()[1];
    let mut c = Tensor::zeros(&[m, n]);
    gemm_tn_acc(a.data(), b.data(), c.data_mut(), k, m, n);
    Ok(c)
}

/// `a · bᵀ` for 2-D tensors.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ok = a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[1];
    check_inner("matmul_nt", a.shape(), b.shape(), ok)?;
    let (m, k) = a.dims2()?;
    let n = b.shape()[0];
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nt_acc(a.data(), b.data(), c.data_mut(), m, k, n);
    Ok(c)
}

/// Adds `bias` to every row of a 2-D tensor in place.
pub fn add_row_bias<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) {
    let n = bias.len();
    for row in x.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of a 2-D tensor, accumulated in row order.
pub fn column_sums<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let n = x.shape()[x.rank() - 1];
    let mut out = vec![T::zero(); n];
    for row in x.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
