//! Shape-manipulating and contraction kernels on plain arrays.
//!
//! These are the untaped building blocks; `tape` wraps them with gradient
//! bookkeeping and the sequential decoder calls them directly.

use super::array::{broadcast_shape, strides_of, DenseArray, Real};
use crate::error::{Error, Result};

/// Views `shape` as `[outer, shape[axis], inner]` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`, with
/// broadcasting over the leading batch dims.
pub fn matmul<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>) -> Result<DenseArray<F>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::shape("matmul needs >= 2-d operands"));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            ash, bsh
        )));
    }
    let batch = broadcast_shape(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2])?;
    let mut out_shape = batch.clone();
    out_shape.extend_from_slice(&[m, n]);
    let nb: usize = batch.iter().product();
    let a_batches: usize = ash[..ash.len() - 2].iter().product();
    let b_batches: usize = bsh[..bsh.len() - 2].iter().product();

    let mut out = vec![F::zero(); nb * m * n];
    let ad = a.data();
    let bd = b.data();
    for bi in 0..nb {
        let ai = batch_offset(bi, &batch, &ash[..ash.len() - 2], a_batches);
        let bj = batch_offset(bi, &batch, &bsh[..bsh.len() - 2], b_batches);
        let asl = &ad[ai * m * k..(ai + 1) * m * k];
        let bsl = &bd[bj * k * n..(bj + 1) * k * n];
        let osl = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let arow = &asl[i * k..(i + 1) * k];
            let orow = &mut osl[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == F::zero() {
                    continue;
                }
                let brow = &bsl[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
    }
    DenseArray::new(out_shape, out)
}

/// Maps a linear index in the broadcast batch shape to the operand's batch index.
fn batch_offset(bi: usize, batch: &[usize], own: &[usize], own_total: usize) -> usize {
    if own_total == 1 {
        return 0;
    }
    if own.len() == batch.len() && own == batch {
        return bi;
    }
    // Decompose bi in `batch` coords, project onto `own` (1 -> stride 0).
    let bstr = strides_of(batch);
    let ostr = strides_of(own);
    let offset = batch.len() - own.len();
    let mut idx = 0;
    for d in 0..batch.len() {
        let coord = (bi / bstr[d]) % batch[d];
        if d >= offset && own[d - offset] != 1 {
            idx += coord * ostr[d - offset];
        }
    }
    idx
}

pub fn swap_axes<F: Real>(a: &DenseArray<F>, ax1: usize, ax2: usize) -> DenseArray<F> {
    if ax1 == ax2 {
        return a.clone();
    }
    let mut shape = a.shape().to_vec();
    shape.swap(ax1, ax2);
    let in_strides = a.strides();
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(ax1, ax2);
    let out_strides = strides_of(&shape);
    let n = a.numel();
    let mut data = vec![F::zero(); n];
    let ad = a.data();
    let nd = shape.len();
    let mut coords = vec![0usize; nd];
    for o in 0..n {
        let mut src = 0;
        for d in 0..nd {
            src += coords[d] * perm_strides[d];
        }
        data[o] = ad[src];
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    let _ = out_strides;
    DenseArray::new(shape, data).expect("swap_axes shape")
}

pub fn narrow<F: Real>(
    a: &DenseArray<F>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<DenseArray<F>> {
    let shape = a.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape(format!(
            "narrow axis {axis} [{start}..{}] out of bounds for {:?}",
            start + len,
            shape
        )));
    }
    let (outer, mid, inner) = axis_split(shape, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    let ad = a.data();
    for o in 0..outer {
        let base = o * mid * inner + start * inner;
        data.extend_from_slice(&ad[base..base + len * inner]);
    }
    DenseArray::new(out_shape, data)
}

pub fn concat<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>, axis: usize) -> Result<DenseArray<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len()
        || sa
            .iter()
            .zip(sb.iter())
            .enumerate()
            .any(|(d, (x, y))| d != axis && x != y)
    {
        return Err(Error::shape(format!(
            "concat shapes {:?} and {:?} on axis {axis}",
            sa, sb
        )));
    }
    let (outer, ma, inner) = axis_split(sa, axis);
    let mb = sb[axis];
    let mut out_shape = sa.to_vec();
    out_shape[axis] = ma + mb;
    let mut data = Vec::with_capacity(outer * (ma + mb) * inner);
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * ma * inner..(o + 1) * ma * inner]);
        data.extend_from_slice(&b.data()[o * mb * inner..(o + 1) * mb * inner]);
    }
    DenseArray::new(out_shape, data)
}

pub fn flip<F: Real>(a: &DenseArray<F>, axis: usize) -> DenseArray<F> {
    let shape = a.shape();
    let (outer, mid, inner) = axis_split(shape, axis);
    let mut data = vec![F::zero(); a.numel()];
    let ad = a.data();
    for o in 0..outer {
        for m in 0..mid {
            let src = o * mid * inner + m * inner;
            let dst = o * mid * inner + (mid - 1 - m) * inner;
            data[dst..dst + inner].copy_from_slice(&ad[src..src + inner]);
        }
    }
    DenseArray::new(shape.to_vec(), data).expect("flip shape")
}

/// Selects rows along axis 0: out[i] = a[idx[i]].
pub fn gather0<F: Real>(a: &DenseArray<F>, idx: &[usize]) -> Result<DenseArray<F>> {
    let shape = a.shape();
    if shape.is_empty() {
        return Err(Error::shape("gather0 on scalar"));
    }
    let rows = shape[0];
    let chunk: usize = shape[1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * chunk);
    for &i in idx {
        if i >= rows {
            return Err(Error::invalid(format!("gather0 index {i} >= {rows}")));
        }
        data.extend_from_slice(&a.data()[i * chunk..(i + 1) * chunk]);
    }
    DenseArray::new(out_shape, data)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<F: Real>(a: &DenseArray<F>) -> DenseArray<F> {
    let shape = a.shape();
    let n = *shape.last().expect("softmax needs >= 1-d");
    let mut data = a.data().to_vec();
    for row in data.chunks_exact_mut(n) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    DenseArray::new(shape.to_vec(), data).expect("softmax shape")
}

/// Sum over the last axis, keeping it as an extent-1 dim.
pub fn sum_last_keepdim<F: Real>(a: &DenseArray<F>) -> DenseArray<F> {
    let shape = a.shape();
    let n = *shape.last().expect("sum_last needs >= 1-d");
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = 1;
    let data = a
        .data()
        .chunks_exact(n)
        .map(|row| row.iter().copied().sum())
        .collect();
    DenseArray::new(out_shape, data).expect("sum_last shape")
}

/// Sum over all axes after the first: `[N, ..] -> [N]`.
pub fn sum_trailing<F: Real>(a: &DenseArray<F>) -> DenseArray<F> {
    let shape = a.shape();
    let n = if shape.is_empty() { 1 } else { shape[0] };
    let chunk: usize = shape.iter().skip(1).product();
    let data = a
        .data()
        .chunks_exact(chunk.max(1))
        .map(|row| row.iter().copied().sum())
        .collect();
    DenseArray::new(vec![n], data).expect("sum_trailing shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2d_matches_hand_product() {
        let a = DenseArray::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseArray::new(vec![3, 2], vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        // [2,2,2] x [2,2] -> [2,2,2]; the rhs is reused per batch.
        let a = DenseArray::new(vec![2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let b = DenseArray::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn narrow_concat_flip_swap() {
        let a = DenseArray::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let n = narrow(&a, 1, 1, 2).unwrap();
        assert_eq!(n.data(), &[2.0, 3.0, 5.0, 6.0]);
        let c = concat(&n, &n, 0).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        let f = flip(&a, 0);
        assert_eq!(f.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        let s = swap_axes(&a, 0, 1);
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = DenseArray::new(vec![2, 3], vec![0.1f64, 1.0, -2.0, 5.0, 5.0, 5.0]).unwrap();
        let s = softmax_lastdim(&a);
        for row in s.data().chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!((s.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows() {
        let a = DenseArray::new(vec![3, 2], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = gather0(&a, &[2, 0]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(gather0(&a, &[3]).is_err());
    }
}
