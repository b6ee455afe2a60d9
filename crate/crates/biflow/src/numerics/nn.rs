//! Transformer building blocks shared by the flow conditioners and the
//! reverse model.
//!
//! Weight containers are generic over their storage `P`: owned
//! `DenseArray<F>` between steps, or tape [`Id`]s during a pass. `bind`
//! registers owned weights as tape leaves; `visit`/`visit_mut` walk them in a
//! fixed order for the optimizer, EMA, and checkpoints.

use super::array::{DenseArray, Real};
use super::rng::Rng;
use super::tape::{Id, Tape};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

#[derive(Clone, Debug)]
pub struct RmsNorm<P> {
    pub g: P,
}

#[derive(Clone, Debug)]
pub struct Attn<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
}

#[derive(Clone, Debug)]
pub struct Mlp<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// Pre-norm transformer layer: x + attn(norm(x)), then x + mlp(norm(x)).
#[derive(Clone, Debug)]
pub struct EncoderLayer<P> {
    pub norm1: RmsNorm<P>,
    pub attn: Attn<P>,
    pub norm2: RmsNorm<P>,
    pub mlp: Mlp<P>,
}

/// Walks every parameter of a weight container in a stable order.
pub trait Params<F: Real> {
    type Bound;

    fn bind(&self, t: &mut Tape<F>, rg: bool) -> Self::Bound;
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray<F>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut DenseArray<F>));
}

impl<F: Real> Params<F> for DenseArray<F> {
    type Bound = Id;

    fn bind(&self, t: &mut Tape<F>, rg: bool) -> Id {
        t.leaf(self.clone(), rg)
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray<F>)) {
        f(prefix.to_string(), self);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut DenseArray<F>)) {
        f(prefix.to_string(), self);
    }
}

impl<F: Real, P: Params<F>> Params<F> for Vec<P> {
    type Bound = Vec<P::Bound>;

    fn bind(&self, t: &mut Tape<F>, rg: bool) -> Self::Bound {
        self.iter().map(|p| p.bind(t, rg)).collect()
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray<F>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&format!("{prefix}.{i}"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut DenseArray<F>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

macro_rules! impl_params {
    ($ty:ident { $($field:ident),+ }) => {
        impl<F: Real, P: Params<F>> Params<F> for $ty<P> {
            type Bound = $ty<P::Bound>;

            fn bind(&self, t: &mut Tape<F>, rg: bool) -> Self::Bound {
                $ty { $($field: self.$field.bind(t, rg)),+ }
            }
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray<F>)) {
                $(self.$field.visit(&format!("{prefix}.{}", stringify!($field)), f);)+
            }
            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a mut DenseArray<F>),
            ) {
                $(self.$field.visit_mut(&format!("{prefix}.{}", stringify!($field)), f);)+
            }
        }
    };
}

pub(crate) use impl_params;

impl_params!(Linear { w, b });
impl_params!(RmsNorm { g });
impl_params!(Attn { wq, wk, wv, wo });
impl_params!(Mlp { w1, b1, w2, b2 });
impl_params!(EncoderLayer { norm1, attn, norm2, mlp });

// ── initialization ──────────────────────────────────────────────────

pub fn init_linear<F: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Linear<DenseArray<F>> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let w = rng
        .gaussian::<F>(&[fan_in, fan_out])
        .map(|x| x * F::from_f64(std));
    Linear {
        w,
        b: DenseArray::zeros(&[fan_out]),
    }
}

/// Zero weights and bias; used for output heads so new modules start as
/// identities.
pub fn zero_linear<F: Real>(fan_in: usize, fan_out: usize) -> Linear<DenseArray<F>> {
    Linear {
        w: DenseArray::zeros(&[fan_in, fan_out]),
        b: DenseArray::zeros(&[fan_out]),
    }
}

pub fn init_embedding<F: Real>(rng: &mut Rng, shape: &[usize]) -> DenseArray<F> {
    rng.gaussian::<F>(shape).map(|x| x * F::from_f64(0.02))
}

pub fn init_layer<F: Real>(rng: &mut Rng, dh: usize, mlp_hidden: usize) -> EncoderLayer<DenseArray<F>> {
    EncoderLayer {
        norm1: RmsNorm {
            g: DenseArray::ones(&[dh]),
        },
        attn: Attn {
            wq: init_linear::<F>(rng, dh, dh).w,
            wk: init_linear::<F>(rng, dh, dh).w,
            wv: init_linear::<F>(rng, dh, dh).w,
            wo: init_linear::<F>(rng, dh, dh).w,
        },
        norm2: RmsNorm {
            g: DenseArray::ones(&[dh]),
        },
        mlp: Mlp {
            w1: init_linear::<F>(rng, dh, mlp_hidden).w,
            b1: DenseArray::zeros(&[mlp_hidden]),
            w2: init_linear::<F>(rng, mlp_hidden, dh).w,
            b2: DenseArray::zeros(&[dh]),
        },
    }
}

// ── forward ─────────────────────────────────────────────────────────

pub fn linear_fwd<F: Real>(t: &mut Tape<F>, x: Id, l: &Linear<Id>) -> Id {
    let y = t.matmul(x, l.w);
    t.add(y, l.b)
}

pub fn rmsnorm_fwd<F: Real>(t: &mut Tape<F>, x: Id, n: &RmsNorm<Id>) -> Id {
    let sq = t.mul(x, x);
    let s = t.sum_last_keepdim(sq);
    let dim = *t.value(x).shape().last().unwrap();
    let mean = t.scale(s, F::one() / F::from_usize(dim));
    let shifted = t.add_scalar(mean, F::from_f64(RMS_EPS));
    let rms = t.sqrt(shifted);
    let y = t.div(x, rms);
    t.mul(y, n.g)
}

pub fn mlp_fwd<F: Real>(t: &mut Tape<F>, x: Id, m: &Mlp<Id>) -> Id {
    let h = t.matmul(x, m.w1);
    let h = t.add(h, m.b1);
    let h = t.silu(h);
    let h = t.matmul(h, m.w2);
    t.add(h, m.b2)
}

/// Additive attention mask: 0 where position `q` may attend `k <= q`, a large
/// negative number elsewhere. The offset underflows to an exact zero weight
/// after softmax, so masked Jacobian entries vanish identically.
pub fn causal_mask<F: Real>(s: usize) -> DenseArray<F> {
    let neg = F::from_f64(-1.0e9);
    let mut m = DenseArray::zeros(&[s, s]);
    for q in 0..s {
        for k in (q + 1)..s {
            m.data_mut()[q * s + k] = neg;
        }
    }
    m
}

/// Multi-head self-attention over `x: [.., S, dh]`.
pub fn attention_fwd<F: Real>(
    t: &mut Tape<F>,
    x: Id,
    a: &Attn<Id>,
    heads: usize,
    causal: bool,
) -> Id {
    let shape = t.value(x).shape().to_vec();
    let nd = shape.len();
    let (s, dh) = (shape[nd - 2], shape[nd - 1]);
    debug_assert!(dh % heads == 0, "width {dh} not divisible by {heads} heads");
    let hd = dh / heads;

    let mut split_shape = shape.clone();
    split_shape.pop();
    split_shape.extend_from_slice(&[heads, hd]);
    // [.., S, H, hd] -> [.., H, S, hd]
    let to_heads = |t: &mut Tape<F>, v: Id| {
        let v = t.reshape(v, &split_shape);
        t.swap_axes(v, split_shape.len() - 3, split_shape.len() - 2)
    };

    let q = t.matmul(x, a.wq);
    let k = t.matmul(x, a.wk);
    let v = t.matmul(x, a.wv);
    let qh = to_heads(t, q);
    let kh = to_heads(t, k);
    let vh = to_heads(t, v);

    let ndh = split_shape.len();
    let kt = t.swap_axes(kh, ndh - 2, ndh - 1);
    let scores = t.matmul(qh, kt);
    let scores = t.scale(scores, F::one() / F::from_f64((hd as f64).sqrt()));
    let scores = if causal {
        let mask = t.constant(causal_mask::<F>(s));
        t.add(scores, mask)
    } else {
        scores
    };
    let p = t.softmax_lastdim(scores);
    let out = t.matmul(p, vh);
    let out = t.swap_axes(out, ndh - 3, ndh - 2);
    let out = t.reshape(out, &shape);
    t.matmul(out, a.wo)
}

pub fn encoder_layer_fwd<F: Real>(
    t: &mut Tape<F>,
    x: Id,
    layer: &EncoderLayer<Id>,
    heads: usize,
    causal: bool,
) -> Id {
    let n1 = rmsnorm_fwd(t, x, &layer.norm1);
    let att = attention_fwd(t, n1, &layer.attn, heads, causal);
    let x = t.add(x, att);
    let n2 = rmsnorm_fwd(t, x, &layer.norm2);
    let m = mlp_fwd(t, n2, &layer.mlp);
    t.add(x, m)
}

/// Convenience wrapper exposing the spec's `causal_attention(q, k, v)`
/// primitive directly on raw arrays (single head, pre-projected inputs).
pub fn causal_attention<F: Real>(
    q: &DenseArray<F>,
    k: &DenseArray<F>,
    v: &DenseArray<F>,
) -> crate::error::Result<DenseArray<F>> {
    use crate::error::Error;
    if q.shape() != k.shape() || k.shape() != v.shape() || q.ndim() < 2 {
        return Err(Error::shape(format!(
            "causal_attention expects matching [T, d] inputs, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut t = Tape::new();
    let (qi, ki, vi) = (
        t.leaf(q.clone(), false),
        t.leaf(k.clone(), false),
        t.leaf(v.clone(), false),
    );
    let out = causal_attention_taped(&mut t, qi, ki, vi);
    Ok(t.value(out).clone())
}

/// Taped single-head causal attention on pre-projected q/k/v.
pub fn causal_attention_taped<F: Real>(t: &mut Tape<F>, q: Id, k: Id, v: Id) -> Id {
    let shape = t.value(q).shape().to_vec();
    let nd = shape.len();
    let (s, d) = (shape[nd - 2], shape[nd - 1]);
    let kt = t.swap_axes(k, nd - 2, nd - 1);
    let scores = t.matmul(q, kt);
    let scores = t.scale(scores, F::one() / F::from_f64((d as f64).sqrt()));
    let mask = t.constant(causal_mask::<F>(s));
    let scores = t.add(scores, mask);
    let p = t.softmax_lastdim(scores);
    t.matmul(p, v)
}
