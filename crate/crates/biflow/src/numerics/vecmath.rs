//! Lean per-row vector helpers for the untaped inference paths. Reduction
//! orders mirror the taped kernels so both paths agree bit-for-bit at a
//! given precision.

use super::array::{DenseArray, Real};
use super::nn::RMS_EPS;

/// y[j] += sum_i x[i] * w[i, j], skipping zero inputs exactly like the
/// batched matmul kernel does.
pub(crate) fn matvec_acc<F: Real>(x: &[F], w: &DenseArray<F>, out: &mut [F]) {
    let cols = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let row = &w.data()[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out[j] = out[j] + xi * row[j];
        }
    }
}

pub(crate) fn rmsnorm_vec<F: Real>(x: &[F], g: &[F]) -> Vec<F> {
    let dim = x.len();
    let sum: F = x.iter().map(|&v| v * v).sum();
    let mean = sum * (F::one() / F::from_usize(dim));
    let rms = (mean + F::from_f64(RMS_EPS)).sqrt();
    x.iter()
        .zip(g.iter())
        .map(|(&v, &gv)| v / rms * gv)
        .collect()
}

/// In-place silu.
pub(crate) fn silu_vec<F: Real>(x: &mut [F]) {
    for v in x.iter_mut() {
        *v = *v / (F::one() + (-*v).exp());
    }
}
