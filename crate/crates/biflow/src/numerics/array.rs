//! Dense n-dimensional arrays over a selectable scalar precision.
//!
//! Everything numeric in this crate flows through [`DenseArray`]: flow states,
//! conditioner weights, gradients, samples. Training and benchmarks run at
//! 32-bit; oracle tests instantiate the same code at 64-bit.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Scalar precision the whole stack is generic over.
pub trait Real:
    num_traits::Float + Debug + Display + std::iter::Sum + Send + Sync + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    fn from_f32_exact(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32_exact(v: f32) -> Self {
        v
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

/// Contiguous row-major array with an explicit shape.
///
/// Invariant: `shape.iter().product() == data.len()` (checked at every
/// construction; a scalar has shape `[]`).
#[derive(Clone, PartialEq)]
pub struct DenseArray<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Debug for DenseArray<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DenseArray{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<F: Real> DenseArray<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(DenseArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        DenseArray {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        DenseArray {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar (or single-element) array.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1, "item() on non-singleton array");
        self.data[0]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Casts every element; exact when widening f32 -> f64.
    pub fn cast<G: Real>(&self) -> DenseArray<G> {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(Real::to_f64(*x))).collect(),
        }
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub fn zip_broadcast<F: Real>(
    a: &DenseArray<F>,
    b: &DenseArray<F>,
    f: impl Fn(F, F) -> F,
) -> Result<DenseArray<F>> {
    // Fast paths cover almost every call site; the stride walk is the fallback.
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(DenseArray {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.numel() == 1 {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.numel() == 1 {
        let x = a.data[0];
        return Ok(DenseArray {
            shape: b.shape.clone(),
            data: b.data.iter().map(|&y| f(x, y)).collect(),
        });
    }
    // Suffix broadcast: b's shape is a trailing suffix of a's (e.g. [N,T,d]+[T,d]).
    if a.shape.len() > b.shape.len() && a.shape.ends_with(&b.shape) {
        let chunk = b.data.len();
        let mut data = Vec::with_capacity(a.data.len());
        for block in a.data.chunks_exact(chunk) {
            data.extend(block.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(DenseArray {
            shape: a.shape.clone(),
            data,
        });
    }
    general_zip_broadcast(a, b, f)
}

fn general_zip_broadcast<F: Real>(
    a: &DenseArray<F>,
    b: &DenseArray<F>,
    f: impl Fn(F, F) -> F,
) -> Result<DenseArray<F>> {
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let nd = out_shape.len();
    let out_strides = strides_of(&out_shape);
    let sa = broadcast_strides(&a.shape, nd);
    let sb = broadcast_strides(&b.shape, nd);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut coords = vec![0usize; nd];
    for _ in 0..n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd {
            ia += coords[d] * sa[d];
            ib += coords[d] * sb[d];
        }
        data.push(f(a.data[ia], b.data[ib]));
        // increment odometer
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    let _ = out_strides;
    DenseArray::new(out_shape, data)
}

/// Strides of `shape` when broadcast up to `nd` dims (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = nd - shape.len();
    let mut s = vec![0usize; nd];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Sums `grad` down to `target` shape, undoing a broadcast.
pub fn reduce_to_shape<F: Real>(grad: &DenseArray<F>, target: &[usize]) -> DenseArray<F> {
    if grad.shape() == target {
        return grad.clone();
    }
    let nd = grad.ndim();
    let offset = nd - target.len();
    let mut out = DenseArray::<F>::zeros(target);
    if target.iter().product::<usize>() == 1 {
        let s: F = grad.data.iter().copied().sum();
        out.data[0] = s;
        return out;
    }
    // Trailing-suffix fast path.
    if grad.shape[offset..] == *target {
        let chunk = out.data.len();
        for block in grad.data.chunks_exact(chunk) {
            for (o, &g) in out.data.iter_mut().zip(block.iter()) {
                *o = *o + g;
            }
        }
        return out;
    }
    let gstrides = grad.strides();
    let tstrides = broadcast_strides(target, nd);
    let mut coords = vec![0usize; nd];
    for gi in 0..grad.data.len() {
        let mut ti = 0;
        for d in 0..nd {
            ti += coords[d] * tstrides[d];
        }
        out.data[ti] = out.data[ti] + grad.data[gi];
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < grad.shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    let _ = gstrides;
    out
}
