//! Central finite differences, the independent oracle the gradient tests
//! compare against. Nothing here touches the tape's backward rules.

use super::array::{DenseArray, Real};

/// Central-difference gradient of `f` w.r.t. flattened entries of `x`.
pub fn fd_grad<F: Real>(
    f: &mut dyn FnMut(&DenseArray<F>) -> F,
    x: &DenseArray<F>,
    step: f64,
) -> DenseArray<F> {
    let mut g = DenseArray::zeros(x.shape());
    let h = F::from_f64(step);
    let two = F::from_f64(2.0);
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (two * h);
    }
    g
}

/// Central difference along a handful of coordinates only; cheap spot check
/// for large parameter tensors. Returns (index, fd_value) pairs.
pub fn fd_grad_coords<F: Real>(
    f: &mut dyn FnMut(&DenseArray<F>) -> F,
    x: &DenseArray<F>,
    coords: &[usize],
    step: f64,
) -> Vec<(usize, F)> {
    let h = F::from_f64(step);
    let two = F::from_f64(2.0);
    let mut xp = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let fp = f(&xp);
            xp.data_mut()[i] = orig - h;
            let fm = f(&xp);
            xp.data_mut()[i] = orig;
            (i, (fp - fm) / (two * h))
        })
        .collect()
}

/// max_i |a_i - b_i| / max(1, |b_i|): relative where the reference is large,
/// absolute near zero.
pub fn max_rel_err<F: Real>(got: &[F], want: &[F]) -> f64 {
    got.iter()
        .zip(want.iter())
        .map(|(&a, &b)| {
            let denom = Real::to_f64(b.abs()).max(1.0);
            Real::to_f64((a - b).abs()) / denom
        })
        .fold(0.0, f64::max)
}
