//! The forward model: stacked autoregressive affine blocks with causal
//! conditioners, alternating sequence flips, parameter clipping, noise
//! injection, and the exact change-of-variables likelihood.
//!
//! Per block, token `t` maps as `y_t = (x_t - mu_t) * exp(-alpha_t)` with
//! `(mu_t, alpha_t)` a function of strictly earlier tokens plus the class
//! prefix, contributing `-sum(alpha)` to the log-determinant. Odd-index
//! blocks reverse the token order on the way in and back out, so recorded
//! trajectory states always live in canonical token order while the
//! autoregressive direction alternates.

mod conditioner;
pub mod train;

pub use conditioner::{conditioner_params, Conditioner};
pub use train::{train_forward, MetricLog, TrainForwardConfig};

use crate::error::{Error, Result};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::kernels;
use crate::numerics::nn::Params;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Id, Tape};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Static shape/hyperparameter description of a forward model.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Number of affine blocks B.
    pub blocks: usize,
    /// Tokens per sample T.
    pub tokens: usize,
    /// Dims per token d.
    pub dim: usize,
    /// Transformer layers per conditioner.
    pub layers: usize,
    /// Conditioner width.
    pub width: usize,
    /// Attention heads.
    pub heads: usize,
    /// Class tokens prepended in context (K >= 1).
    pub class_tokens: usize,
    /// Number of classes C; the embedding table has one extra null row.
    pub classes: usize,
    /// Clip range c for both mu and alpha.
    pub clip: f64,
    /// Noise level sigma for training-time noise injection.
    pub sigma: f64,
}

impl FlowConfig {
    pub fn mlp_hidden(&self) -> usize {
        2 * self.width
    }

    /// Row index of the learned null-class token.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.tokens == 0 || self.dim == 0 {
            return Err(Error::invalid("blocks, tokens and dim must be >= 1"));
        }
        if self.class_tokens == 0 {
            return Err(Error::invalid("at least one class token is required"));
        }
        if self.clip <= 0.0 {
            return Err(Error::invalid("clip range must be positive"));
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid("noise level must be >= 0"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid("width must be divisible by heads"));
        }
        Ok(())
    }
}

/// Per-token affine parameters emitted by a conditioner.
#[derive(Clone, Debug)]
pub struct AffineParams<F: Real> {
    pub mu: DenseArray<F>,
    pub alpha: DenseArray<F>,
}

/// Elementwise clamp of both parameter tensors to `[-c, c]`.
pub fn clip_params<F: Real>(raw: &AffineParams<F>, c: F) -> Result<AffineParams<F>> {
    if c <= F::zero() {
        return Err(Error::invalid("clip range must be positive"));
    }
    let clamp = |x: F| {
        if x < -c {
            -c
        } else if x > c {
            c
        } else {
            x
        }
    };
    Ok(AffineParams {
        mu: raw.mu.map(clamp),
        alpha: raw.alpha.map(clamp),
    })
}

/// The forward flow `F`: B conditioner blocks plus a shared class table.
#[derive(Clone, Debug)]
pub struct FlowModel<F: Real> {
    pub cfg: FlowConfig,
    /// `[C + 1, K, width]`; the last row is the null class learned via label drop.
    pub cls: DenseArray<F>,
    pub blocks: Vec<Conditioner<DenseArray<F>>>,
}

/// Tape-bound view of a [`FlowModel`].
pub struct BoundFlow {
    pub cls: Id,
    pub blocks: Vec<Conditioner<Id>>,
}

impl<F: Real> FlowModel<F> {
    pub fn init(cfg: FlowConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let cls = crate::numerics::nn::init_embedding(
            rng,
            &[cfg.classes + 1, cfg.class_tokens, cfg.width],
        );
        let blocks = (0..cfg.blocks)
            .map(|_| Conditioner::init(&cfg, rng))
            .collect();
        Ok(FlowModel { cfg, cls, blocks })
    }

    /// Whether block `i` reverses token order (odd blocks flip).
    pub fn flips(&self, block: usize) -> bool {
        block % 2 == 1
    }

    pub fn bind(&self, t: &mut Tape<F>, rg: bool) -> BoundFlow {
        BoundFlow {
            cls: self.cls.bind(t, rg),
            blocks: self.blocks.iter().map(|b| b.bind(t, rg)).collect(),
        }
    }

    /// Binds every parameter as a gradient leaf and returns the leaf ids in
    /// visit order, ready for [`Tape::grad`].
    pub fn bind_trainable(&self, t: &mut Tape<F>) -> (BoundFlow, Vec<Id>) {
        let start = t.len();
        let bound = self.bind(t, true);
        let ids = (start..t.len()).map(Id::from_index).collect();
        (bound, ids)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a DenseArray<F>)) {
        self.cls.visit("cls", f);
        self.blocks.visit("blocks", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut DenseArray<F>)) {
        self.cls.visit_mut("cls", f);
        self.blocks.visit_mut("blocks", f);
    }

    pub fn params(&self) -> Vec<&DenseArray<F>> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn param_values(&self) -> Vec<DenseArray<F>> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, vals: &[DenseArray<F>]) {
        let mut i = 0;
        self.visit_mut(&mut |_, p| {
            *p = vals[i].clone();
            i += 1;
        });
        assert_eq!(i, vals.len(), "parameter count mismatch");
    }

    /// Copy of the model with the given parameter values (EMA evaluation).
    pub fn with_params(&self, vals: &[DenseArray<F>]) -> Self {
        let mut m = self.clone();
        m.set_params(vals);
        m
    }

    /// Replaces the zero output heads with small random weights, making every
    /// block a non-identity map. Used to build random untrained models for
    /// roundtrip and log-det exercises.
    pub fn randomize_output_heads(&mut self, rng: &mut Rng, scale: f64) {
        for b in &mut self.blocks {
            let s = F::from_f64(scale);
            b.head.w = rng
                .gaussian::<F>(b.head.w.shape())
                .map(|x| x * s);
            b.head.b = rng
                .gaussian::<F>(b.head.b.shape())
                .map(|x| x * s);
        }
    }

    pub fn cast<G: Real>(&self) -> FlowModel<G> {
        let mut other = FlowModel {
            cfg: self.cfg.clone(),
            cls: self.cls.cast(),
            blocks: Vec::new(),
        };
        // Rebuild blocks by casting every tensor through the visitor order.
        let mut rng = Rng::new(0);
        let mut proto = FlowModel::<G>::init(self.cfg.clone(), &mut rng).expect("valid cfg");
        let vals: Vec<DenseArray<G>> = self.params().iter().map(|p| p.cast()).collect();
        proto.set_params(&vals);
        other.cls = proto.cls.clone();
        other.blocks = proto.blocks;
        other
    }
}

/// Ordered forward states `x^0 = x_tilde, ..., x^B = z` plus the accumulated
/// per-sample log-determinant.
#[derive(Clone, Debug)]
pub struct ForwardTrajectory<F: Real> {
    pub states: Vec<DenseArray<F>>,
    pub logdet: DenseArray<F>,
}

impl<F: Real> ForwardTrajectory<F> {
    pub fn z(&self) -> &DenseArray<F> {
        self.states.last().expect("trajectory has B+1 states")
    }
    pub fn x_tilde(&self) -> &DenseArray<F> {
        &self.states[0]
    }
}

/// Gathers per-sample class token stacks `[N, K, width]` from the table.
pub fn class_token_ids<F: Real>(
    t: &mut Tape<F>,
    cls_table: Id,
    labels: &[usize],
    _cfg: &FlowConfig,
) -> Id {
    t.gather0(cls_table, labels)
}

/// One affine block on the tape: returns `(y, logdet_contribution)`.
///
/// `flip` reverses token order before the autoregressive transform and back
/// after it, so input and output share the canonical ordering.
pub fn apply_block<F: Real>(
    t: &mut Tape<F>,
    x: Id,
    cls: Id,
    w: &Conditioner<Id>,
    flip: bool,
    cfg: &FlowConfig,
) -> Result<(Id, Id)> {
    let xin = if flip { t.flip(x, 1) } else { x };
    let (mu, alpha) = conditioner_params(t, xin, cls, w, cfg);
    if !t.value(mu).all_finite() || !t.value(alpha).all_finite() {
        return Err(Error::NonFinite("conditioner parameters".into()));
    }
    let centered = t.sub(xin, mu);
    let neg_alpha = t.neg(alpha);
    let scale = t.exp(neg_alpha);
    let y = t.mul(centered, scale);
    let ld_sum = t.sum_trailing(alpha);
    let ld = t.neg(ld_sum);
    let y = if flip { t.flip(y, 1) } else { y };
    Ok((y, ld))
}

/// Full taped pass through all blocks from `x_tilde`: returns the B+1 state
/// ids and the accumulated per-sample log-determinant.
pub fn flow_states<F: Real>(
    t: &mut Tape<F>,
    x_tilde: Id,
    labels: &[usize],
    bound: &BoundFlow,
    cfg: &FlowConfig,
) -> Result<(Vec<Id>, Id)> {
    let cls = class_token_ids(t, bound.cls, labels, cfg);
    let mut states = vec![x_tilde];
    let n = labels.len();
    let mut logdet = t.constant(DenseArray::zeros(&[n]));
    let mut x = x_tilde;
    for (i, w) in bound.blocks.iter().enumerate() {
        let (y, ld) = apply_block(t, x, cls, w, i % 2 == 1, cfg)?;
        logdet = t.add(logdet, ld);
        states.push(y);
        x = y;
    }
    Ok((states, logdet))
}

/// Per-sample log-density of the model at `x` (no noise injection):
/// `log p(x) = log p0(F(x)) + logdet`.
pub fn log_prob_taped<F: Real>(
    t: &mut Tape<F>,
    x: Id,
    labels: &[usize],
    bound: &BoundFlow,
    cfg: &FlowConfig,
) -> Result<Id> {
    let (states, logdet) = flow_states(t, x, labels, bound, cfg)?;
    let z = *states.last().unwrap();
    let zsq = t.mul(z, z);
    let ssq = t.sum_trailing(zsq);
    let half = t.scale(ssq, F::from_f64(-0.5));
    let dims = (cfg.tokens * cfg.dim) as f64;
    let logp0 = t.add_scalar(half, F::from_f64(-0.5 * dims * LN_2PI));
    Ok(t.add(logp0, logdet))
}

/// Mean negative log-likelihood from prior outputs and log-determinants.
pub fn nll_taped<F: Real>(t: &mut Tape<F>, z: Id, logdet: Id, dims: usize) -> Id {
    let zsq = t.mul(z, z);
    let ssq = t.sum_trailing(zsq);
    let half = t.scale(ssq, F::from_f64(-0.5));
    let logp0 = t.add_scalar(half, F::from_f64(-0.5 * dims as f64 * LN_2PI));
    let logp = t.add(logp0, logdet);
    let m = t.mean_all(logp);
    t.neg(m)
}

/// Noise injection followed by the full block stack, recorded as values.
///
/// State 0 is `x_tilde = x + sigma * eps`; class conditioning enters as
/// prepended in-context tokens.
pub fn forward_trajectory<F: Real>(
    x: &DenseArray<F>,
    labels: &[usize],
    model: &FlowModel<F>,
    rng: &mut Rng,
) -> Result<ForwardTrajectory<F>> {
    let eps = rng.gaussian::<F>(x.shape());
    let sigma = F::from_f64(model.cfg.sigma);
    let noised = crate::numerics::array::zip_broadcast(x, &eps, |a, e| a + sigma * e)?;
    forward_trajectory_noiseless(&noised, labels, model)
}

/// The block stack applied to `x_tilde` as given (no noise drawn).
pub fn forward_trajectory_noiseless<F: Real>(
    x_tilde: &DenseArray<F>,
    labels: &[usize],
    model: &FlowModel<F>,
) -> Result<ForwardTrajectory<F>> {
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let xi = t.leaf(x_tilde.clone(), false);
    let (states, logdet) = flow_states(&mut t, xi, labels, &bound, &model.cfg)?;
    Ok(ForwardTrajectory {
        states: states.iter().map(|&s| t.value(s).clone()).collect(),
        logdet: t.value(logdet).clone(),
    })
}

/// Mean NLL of a recorded trajectory under the standard-normal prior.
pub fn nll_loss<F: Real>(traj: &ForwardTrajectory<F>) -> F {
    let z = traj.z();
    let n = z.shape()[0];
    let dims: usize = z.shape().iter().skip(1).product();
    let zsq = z.map(|v| v * v);
    let ssq = kernels::sum_trailing(&zsq);
    let mut total = F::zero();
    for i in 0..n {
        let logp0 = F::from_f64(-0.5) * ssq.data()[i]
            + F::from_f64(-0.5 * dims as f64 * LN_2PI);
        total = total + logp0 + traj.logdet.data()[i];
    }
    -(total / F::from_usize(n))
}

/// Per-sample log-density values (convenience wrapper over the taped path).
pub fn log_prob<F: Real>(
    x: &DenseArray<F>,
    labels: &[usize],
    model: &FlowModel<F>,
) -> Result<DenseArray<F>> {
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let xi = t.leaf(x.clone(), false);
    let lp = log_prob_taped(&mut t, xi, labels, &bound, &model.cfg)?;
    Ok(t.value(lp).clone())
}
