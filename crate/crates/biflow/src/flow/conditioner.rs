//! Per-block causal conditioner.
//!
//! Each flow block owns a small causal transformer that reads the class
//! tokens followed by the block's input tokens and emits per-token affine
//! parameters. The output head is zero-initialized so a fresh block is the
//! identity transform.

use crate::numerics::array::{DenseArray, Real};
use crate::numerics::nn::{
    encoder_layer_fwd, impl_params, init_embedding, init_layer, init_linear, linear_fwd,
    zero_linear, EncoderLayer, Linear, Params,
};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Id, Tape};

use super::FlowConfig;

#[derive(Clone, Debug)]
pub struct Conditioner<P> {
    pub tok: Linear<P>,
    pub pos: P,
    pub layers: Vec<EncoderLayer<P>>,
    pub head: Linear<P>,
}

impl_params!(Conditioner { tok, pos, layers, head });

impl<F: Real> Conditioner<DenseArray<F>> {
    pub fn init(cfg: &FlowConfig, rng: &mut Rng) -> Self {
        let dh = cfg.width;
        let seq = cfg.class_tokens + cfg.tokens;
        Conditioner {
            tok: init_linear(rng, cfg.dim, dh),
            pos: init_embedding(rng, &[seq, dh]),
            layers: (0..cfg.layers)
                .map(|_| init_layer(rng, dh, cfg.mlp_hidden()))
                .collect(),
            head: zero_linear(dh, 2 * cfg.dim),
        }
    }
}

/// Runs the conditioner on `x: [N, T, d]` with class tokens `[N, K, dh]`,
/// returning clipped `(mu, alpha)`, each `[N, T, d]`.
///
/// Parameters for token `t` are read off the position holding token `t - 1`
/// (the last class token for `t = 0`), so they depend only on strictly
/// earlier tokens plus the conditioning prefix.
pub fn conditioner_params<F: Real>(
    t: &mut Tape<F>,
    x: Id,
    cls: Id,
    w: &Conditioner<Id>,
    cfg: &FlowConfig,
) -> (Id, Id) {
    let k = cfg.class_tokens;
    let tokens = cfg.tokens;
    let emb = linear_fwd(t, x, &w.tok);
    let seq = t.concat(cls, emb, 1);
    let seq = t.add(seq, w.pos);
    let mut h = seq;
    for layer in &w.layers {
        h = encoder_layer_fwd(t, h, layer, cfg.heads, true);
    }
    let outs = t.narrow(h, 1, k - 1, tokens);
    let raw = linear_fwd(t, outs, &w.head);
    let c = F::from_f64(cfg.clip);
    let mu = t.narrow(raw, 2, 0, cfg.dim);
    let alpha = t.narrow(raw, 2, cfg.dim, cfg.dim);
    let mu = t.clamp(mu, -c, c);
    let alpha = t.clamp(alpha, -c, c);
    (mu, alpha)
}
