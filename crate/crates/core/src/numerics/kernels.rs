//! Plain loops with a fixed accumulation order. Every output element is
//! accumulated over the inner dimension in ascending index order, so a row's
//! result never depends on which other rows share the call.

use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// `c += a · b`
pub fn matmul_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

pub fn transpose<F: Scalar>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut t = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

/// Inner product accumulated in `f64`.
#[inline]
pub fn dot_f64<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x.to_f64() * y.to_f64();
    }
    s
}
