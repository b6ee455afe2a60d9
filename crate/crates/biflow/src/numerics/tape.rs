//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every array produced during one logical forward pass. Ops
//! push nodes in execution order, which is already a topological order, so the
//! backward sweep is a single reverse walk. Tapes are cheap to build and are
//! dropped (or truncated) after each step.

use super::array::{reduce_to_shape, zip_broadcast, DenseArray, Real};
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

impl Id {
    /// Rebuilds a handle from a raw node index (as reported by
    /// [`Tape::len`] at creation time). Valid only for the tape that issued
    /// the index.
    pub fn from_index(index: usize) -> Self {
        Id(index)
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Exp(Id),
    Ln(Id),
    Sqrt(Id),
    Tanh(Id),
    Silu(Id),
    Scale(Id, F),
    AddScalar(Id, F),
    Clamp(Id, F, F),
    MatMul(Id, Id),
    SwapAxes(Id, usize, usize),
    Reshape(Id),
    SumAll(Id),
    MeanAll(Id),
    SumLastKeep(Id),
    SumTrailing(Id),
    MeanTrailing(Id),
    Softmax(Id),
    Narrow(Id, usize, usize, usize),
    Concat(Id, Id, usize),
    Flip(Id, usize),
    Gather0(Id, Vec<usize>),
    StopGrad(#[allow(dead_code)] Id),
}

struct Node<F: Real> {
    value: DenseArray<F>,
    op: Op<F>,
    rg: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients returned by [`Tape::grad`]. `off_tape[i]` flags inputs that had
/// no path to the loss; their gradient entry is exact zero.
pub struct Grads<F: Real> {
    pub grads: Vec<DenseArray<F>>,
    pub off_tape: Vec<bool>,
}

impl<F: Real> Grads<F> {
    pub fn any_off_tape(&self) -> bool {
        self.off_tape.iter().any(|&b| b)
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes at or past `mark`; earlier ids stay valid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, id: Id) -> &DenseArray<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: Id) -> bool {
        self.nodes[id.0].rg
    }

    fn push(&mut self, value: DenseArray<F>, op: Op<F>, rg: bool) -> Id {
        self.nodes.push(Node { value, op, rg });
        Id(self.nodes.len() - 1)
    }

    fn rg2(&self, a: Id, b: Id) -> bool {
        self.nodes[a.0].rg || self.nodes[b.0].rg
    }

    // ── construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, value: DenseArray<F>, requires_grad: bool) -> Id {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: DenseArray<F>) -> Id {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: F) -> Id {
        self.constant(DenseArray::scalar(v))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y).expect("add broadcast");
        let rg = self.rg2(a, b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y).expect("sub broadcast");
        let rg = self.rg2(a, b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y).expect("mul broadcast");
        let rg = self.rg2(a, b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y).expect("div broadcast");
        let rg = self.rg2(a, b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| -x);
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Neg(a), rg)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.ln());
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.sqrt());
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Tanh(a), rg)
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: Id) -> Id {
        let v = self.value(a).map(|x| x / (F::one() + (-x).exp()));
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Silu(a), rg)
    }

    pub fn scale(&mut self, a: Id, s: F) -> Id {
        let v = self.value(a).map(|x| x * s);
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Id, s: F) -> Id {
        let v = self.value(a).map(|x| x + s);
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::AddScalar(a, s), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes through the interior
    /// and is zero on the clamped region.
    pub fn clamp(&mut self, a: Id, lo: F, hi: F) -> Id {
        let v = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    // ── contraction / shape ─────────────────────────────────────────

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = kernels::matmul(self.value(a), self.value(b)).expect("matmul shapes");
        let rg = self.rg2(a, b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn swap_axes(&mut self, a: Id, ax1: usize, ax2: usize) -> Id {
        let v = kernels::swap_axes(self.value(a), ax1, ax2);
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::SwapAxes(a, ax1, ax2), rg)
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.value(a).reshape(shape).expect("reshape numel");
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn sum_all(&mut self, a: Id) -> Id {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.nodes[a.0].rg;
        self.push(DenseArray::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let n = self.value(a).numel().max(1);
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.nodes[a.0].rg;
        self.push(
            DenseArray::scalar(s / F::from_usize(n)),
            Op::MeanAll(a),
            rg,
        )
    }

    pub fn sum_last_keepdim(&mut self, a: Id) -> Id {
        let v = kernels::sum_last_keepdim(self.value(a));
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::SumLastKeep(a), rg)
    }

    /// `[N, ..] -> [N]` sum over trailing axes.
    pub fn sum_trailing(&mut self, a: Id) -> Id {
        let v = kernels::sum_trailing(self.value(a));
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::SumTrailing(a), rg)
    }

    /// `[N, ..] -> [N]` mean over trailing axes.
    pub fn mean_trailing(&mut self, a: Id) -> Id {
        let val = self.value(a);
        let chunk: usize = val.shape().iter().skip(1).product::<usize>().max(1);
        let v = kernels::sum_trailing(val).map(|x| x / F::from_usize(chunk));
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::MeanTrailing(a), rg)
    }

    pub fn softmax_lastdim(&mut self, a: Id) -> Id {
        let v = kernels::softmax_lastdim(self.value(a));
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn narrow(&mut self, a: Id, axis: usize, start: usize, len: usize) -> Id {
        let v = kernels::narrow(self.value(a), axis, start, len).expect("narrow bounds");
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Narrow(a, axis, start, len), rg)
    }

    pub fn concat(&mut self, a: Id, b: Id, axis: usize) -> Id {
        let v = kernels::concat(self.value(a), self.value(b), axis).expect("concat shapes");
        let rg = self.rg2(a, b);
        self.push(v, Op::Concat(a, b, axis), rg)
    }

    pub fn flip(&mut self, a: Id, axis: usize) -> Id {
        let v = kernels::flip(self.value(a), axis);
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Flip(a, axis), rg)
    }

    pub fn gather0(&mut self, a: Id, idx: &[usize]) -> Id {
        let v = kernels::gather0(self.value(a), idx).expect("gather bounds");
        let rg = self.nodes[a.0].rg;
        self.push(v, Op::Gather0(a, idx.to_vec()), rg)
    }

    /// Identity with a severed gradient path.
    pub fn stop_grad(&mut self, a: Id) -> Id {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad(a), false)
    }

    // ── reverse sweep ───────────────────────────────────────────────

    /// Gradient of scalar `loss` w.r.t. each of `inputs`.
    pub fn grad(&self, loss: Id, inputs: &[Id]) -> Result<Grads<F>> {
        if !self.value(loss).is_scalar() && self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "grad requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<DenseArray<F>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(DenseArray::full(self.value(loss).shape(), F::one()));

        for i in (0..=loss.0).rev() {
            if adj[i].is_none() || !self.nodes[i].rg {
                continue;
            }
            let g = adj[i].take().unwrap();
            self.backward_step(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let mut grads = Vec::with_capacity(inputs.len());
        let mut off_tape = Vec::with_capacity(inputs.len());
        for &id in inputs {
            match adj.get(id.0).and_then(|g| g.clone()) {
                Some(g) if self.nodes[id.0].rg => {
                    grads.push(g);
                    off_tape.push(false);
                }
                _ => {
                    grads.push(DenseArray::zeros(self.value(id).shape()));
                    off_tape.push(true);
                }
            }
        }
        Ok(Grads { grads, off_tape })
    }

    fn accum(&self, adj: &mut [Option<DenseArray<F>>], id: Id, g: DenseArray<F>) {
        if !self.nodes[id.0].rg {
            return;
        }
        match &mut adj[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_step(&self, i: usize, g: &DenseArray<F>, adj: &mut [Option<DenseArray<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, reduce_to_shape(g, self.value(*a).shape()));
                self.accum(adj, *b, reduce_to_shape(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, reduce_to_shape(g, self.value(*a).shape()));
                let gb = reduce_to_shape(g, self.value(*b).shape()).map(|x| -x);
                self.accum(adj, *b, gb);
            }
            Op::Mul(a, b) => {
                let ga = zip_broadcast(g, self.value(*b), |gv, bv| gv * bv).unwrap();
                self.accum(adj, *a, reduce_to_shape(&ga, self.value(*a).shape()));
                let gb = zip_broadcast(g, self.value(*a), |gv, av| gv * av).unwrap();
                self.accum(adj, *b, reduce_to_shape(&gb, self.value(*b).shape()));
            }
            Op::Div(a, b) => {
                let ga = zip_broadcast(g, self.value(*b), |gv, bv| gv / bv).unwrap();
                self.accum(adj, *a, reduce_to_shape(&ga, self.value(*a).shape()));
                let out = zip_broadcast(self.value(*a), self.value(*b), |av, bv| {
                    -av / (bv * bv)
                })
                .unwrap();
                let gb = zip_broadcast(g, &out, |gv, ov| gv * ov).unwrap();
                self.accum(adj, *b, reduce_to_shape(&gb, self.value(*b).shape()));
            }
            Op::Neg(a) => self.accum(adj, *a, g.map(|x| -x)),
            Op::Exp(a) => {
                let ga = zip_broadcast(g, &self.nodes[i].value, |gv, y| gv * y).unwrap();
                self.accum(adj, *a, ga);
            }
            Op::Ln(a) => {
                let ga = zip_broadcast(g, self.value(*a), |gv, x| gv / x).unwrap();
                self.accum(adj, *a, ga);
            }
            Op::Sqrt(a) => {
                let half = F::from_f64(0.5);
                let ga = zip_broadcast(g, &self.nodes[i].value, |gv, y| gv * half / y).unwrap();
                self.accum(adj, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_broadcast(g, &self.nodes[i].value, |gv, y| gv * (F::one() - y * y))
                    .unwrap();
                self.accum(adj, *a, ga);
            }
            Op::Silu(a) => {
                let ga = zip_broadcast(g, self.value(*a), |gv, x| {
                    let s = F::one() / (F::one() + (-x).exp());
                    gv * (s * (F::one() + x * (F::one() - s)))
                })
                .unwrap();
                self.accum(adj, *a, ga);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(adj, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a, _) => self.accum(adj, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = zip_broadcast(g, self.value(*a), |gv, x| {
                    if x < lo || x > hi {
                        F::zero()
                    } else {
                        gv
                    }
                })
                .unwrap();
                self.accum(adj, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nd_b = bv.ndim();
                let bt = kernels::swap_axes(bv, nd_b - 2, nd_b - 1);
                let ga = kernels::matmul(g, &bt).unwrap();
                self.accum(adj, *a, reduce_to_shape(&ga, av.shape()));
                let nd_a = av.ndim();
                let at = kernels::swap_axes(av, nd_a - 2, nd_a - 1);
                let gb = kernels::matmul(&at, g).unwrap();
                self.accum(adj, *b, reduce_to_shape(&gb, bv.shape()));
            }
            Op::SwapAxes(a, ax1, ax2) => {
                self.accum(adj, *a, kernels::swap_axes(g, *ax1, *ax2));
            }
            Op::Reshape(a) => {
                let ga = g.reshape(self.value(*a).shape()).unwrap();
                self.accum(adj, *a, ga);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accum(adj, *a, DenseArray::full(self.value(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let n = F::from_usize(self.value(*a).numel().max(1));
                let gv = g.item() / n;
                self.accum(adj, *a, DenseArray::full(self.value(*a).shape(), gv));
            }
            Op::SumLastKeep(a) => {
                let ga = zip_broadcast(
                    &DenseArray::zeros(self.value(*a).shape()),
                    g,
                    |_, gv| gv,
                )
                .unwrap();
                self.accum(adj, *a, ga);
            }
            Op::SumTrailing(a) => {
                let shape = self.value(*a).shape().to_vec();
                let chunk: usize = shape.iter().skip(1).product::<usize>().max(1);
                let mut data = Vec::with_capacity(self.value(*a).numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat(gv).take(chunk));
                }
                self.accum(adj, *a, DenseArray::new(shape, data).unwrap());
            }
            Op::MeanTrailing(a) => {
                let shape = self.value(*a).shape().to_vec();
                let chunk: usize = shape.iter().skip(1).product::<usize>().max(1);
                let inv = F::one() / F::from_usize(chunk);
                let mut data = Vec::with_capacity(self.value(*a).numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat(gv * inv).take(chunk));
                }
                self.accum(adj, *a, DenseArray::new(shape, data).unwrap());
            }
            Op::Softmax(a) => {
                // dx = y * (g - sum_last(g * y))
                let y = &self.nodes[i].value;
                let gy = zip_broadcast(g, y, |gv, yv| gv * yv).unwrap();
                let s = kernels::sum_last_keepdim(&gy);
                let g_minus = zip_broadcast(g, &s, |gv, sv| gv - sv).unwrap();
                let ga = zip_broadcast(y, &g_minus, |yv, gv| yv * gv).unwrap();
                self.accum(adj, *a, ga);
            }
            Op::Narrow(a, axis, start, len) => {
                let src_shape = self.value(*a).shape();
                let (outer, mid, inner) = kernels::axis_split(src_shape, *axis);
                let mut ga = DenseArray::zeros(src_shape);
                let gd = g.data();
                for o in 0..outer {
                    let dst = o * mid * inner + start * inner;
                    let src = o * len * inner;
                    ga.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accum(adj, *a, ga);
            }
            Op::Concat(a, b, axis) => {
                let la = self.value(*a).shape()[*axis];
                let lb = self.value(*b).shape()[*axis];
                let ga = kernels::narrow(g, *axis, 0, la).unwrap();
                let gb = kernels::narrow(g, *axis, la, lb).unwrap();
                self.accum(adj, *a, ga);
                self.accum(adj, *b, gb);
            }
            Op::Flip(a, axis) => {
                self.accum(adj, *a, kernels::flip(g, *axis));
            }
            Op::Gather0(a, idx) => {
                let src_shape = self.value(*a).shape();
                let chunk: usize = src_shape[1..].iter().product();
                let mut ga = DenseArray::zeros(src_shape);
                for (row, &i_src) in idx.iter().enumerate() {
                    let src = &g.data()[row * chunk..(row + 1) * chunk];
                    let dst = &mut ga.data_mut()[i_src * chunk..(i_src + 1) * chunk];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + s;
                    }
                }
                self.accum(adj, *a, ga);
            }
        }
    }
}
