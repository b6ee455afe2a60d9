//! Incremental conditioner evaluation with cached attention keys/values.
//!
//! Sequential inversion decodes one token at a time; recomputing the full
//! prefix per token is quadratic in work, so keys and values are cached per
//! layer. Every reduction here iterates in the same order as the taped
//! full-sequence path, which keeps cached decoding bitwise-equal to
//! full-prefix recomputation at a given precision.

use crate::error::{Error, Result};
use crate::flow::{Conditioner, FlowConfig, FlowModel};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::vecmath::{matvec_acc, rmsnorm_vec, silu_vec};

/// Per-block, per-layer cached attention keys/values up to the current token.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    layers: usize,
    width: usize,
    capacity: usize,
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(layers: usize, width: usize, capacity: usize) -> Self {
        KvCache {
            layers,
            width,
            capacity,
            k: vec![vec![F::zero(); capacity * width]; layers],
            v: vec![vec![F::zero(); capacity * width]; layers],
            len: 0,
        }
    }

    pub fn for_model<G: Real>(model: &FlowModel<G>) -> KvCache<F> {
        let cfg = &model.cfg;
        KvCache::new(cfg.layers, cfg.width, cfg.class_tokens + cfg.tokens)
    }

    pub fn compatible(&self, cfg: &FlowConfig) -> bool {
        self.layers == cfg.layers
            && self.width == cfg.width
            && self.capacity >= cfg.class_tokens + cfg.tokens
    }

    pub fn reset(&mut self) {
        self.len = 0;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Writes this position's K/V rows; `len` advances once per position, in
    /// `TokenDecoder::advance`, after every layer has consumed it.
    fn push(&mut self, layer: usize, k: &[F], v: &[F]) {
        debug_assert!(self.len < self.capacity, "kv cache overflow");
        let (at, w) = (self.len, self.width);
        self.k[layer][at * w..(at + 1) * w].copy_from_slice(k);
        self.v[layer][at * w..(at + 1) * w].copy_from_slice(v);
    }
}


/// Streams tokens through one conditioner, caching K/V, exposing the affine
/// parameters implied by the tokens fed so far.
pub struct TokenDecoder<'m, F: Real> {
    w: &'m Conditioner<DenseArray<F>>,
    cls: &'m DenseArray<F>,
    cfg: &'m FlowConfig,
    cache: KvCache<F>,
    last_hidden: Vec<F>,
    /// Calls to `feed_*`; the benchmark counts these.
    pub steps: u64,
}

impl<'m, F: Real> TokenDecoder<'m, F> {
    pub fn new(model: &'m FlowModel<F>, block: usize) -> Self {
        TokenDecoder {
            w: &model.blocks[block],
            cls: &model.cls,
            cfg: &model.cfg,
            cache: KvCache::new(
                model.cfg.layers,
                model.cfg.width,
                model.cfg.class_tokens + model.cfg.tokens,
            ),
            last_hidden: vec![F::zero(); model.cfg.width],
            steps: 0,
        }
    }

    /// Rebuilds the decoder on an externally supplied cache buffer.
    pub fn with_cache(
        model: &'m FlowModel<F>,
        block: usize,
        mut cache: KvCache<F>,
    ) -> Result<Self> {
        if !cache.compatible(&model.cfg) {
            return Err(Error::invalid(
                "kv cache shape does not match the model configuration",
            ));
        }
        cache.reset();
        Ok(TokenDecoder {
            w: &model.blocks[block],
            cls: &model.cls,
            cfg: &model.cfg,
            cache,
            last_hidden: vec![F::zero(); model.cfg.width],
            steps: 0,
        })
    }

    pub fn into_cache(self) -> KvCache<F> {
        self.cache
    }

    /// Feeds the K class tokens for `label` (positions 0..K).
    pub fn feed_class(&mut self, label: usize) {
        let (k, dh) = (self.cfg.class_tokens, self.cfg.width);
        for j in 0..k {
            let base = (label * k + j) * dh;
            let mut e: Vec<F> = self.cls.data()[base..base + dh].to_vec();
            let pos = &self.w.pos.data()[j * dh..(j + 1) * dh];
            for (ev, &pv) in e.iter_mut().zip(pos.iter()) {
                *ev = *ev + pv;
            }
            self.advance(e);
        }
    }

    /// Feeds data token `x_t` (pos index continues after the class prefix).
    pub fn feed_token(&mut self, x_t: &[F]) {
        let dh = self.cfg.width;
        let mut e = self.w.tok.b.data().to_vec();
        matvec_acc(x_t, &self.w.tok.w, &mut e);
        let p = self.cache.len;
        let pos = &self.w.pos.data()[p * dh..(p + 1) * dh];
        for (ev, &pv) in e.iter_mut().zip(pos.iter()) {
            *ev = *ev + pv;
        }
        self.advance(e);
    }

    fn advance(&mut self, mut e: Vec<F>) {
        self.steps += 1;
        let dh = self.cfg.width;
        let heads = self.cfg.heads;
        let hd = dh / heads;
        let scale = F::one() / F::from_f64((hd as f64).sqrt());
        for (li, layer) in self.w.layers.iter().enumerate() {
            let n1 = rmsnorm_vec(&e, layer.norm1.g.data());
            let mut q = vec![F::zero(); dh];
            let mut kk = vec![F::zero(); dh];
            let mut vv = vec![F::zero(); dh];
            matvec_acc(&n1, &layer.attn.wq, &mut q);
            matvec_acc(&n1, &layer.attn.wk, &mut kk);
            matvec_acc(&n1, &layer.attn.wv, &mut vv);
            self.cache.push(li, &kk, &vv);
            let rows = self.cache.len + 1;
            let kcache = &self.cache.k[li];
            let vcache = &self.cache.v[li];
            let mut merged = vec![F::zero(); dh];
            for h in 0..heads {
                let qh = &q[h * hd..(h + 1) * hd];
                // scores over the prefix, same reduction order as the full pass
                let mut scores = Vec::with_capacity(rows);
                for s in 0..rows {
                    let krow = &kcache[s * dh + h * hd..s * dh + (h + 1) * hd];
                    let mut dot = F::zero();
                    for (a, b) in qh.iter().zip(krow.iter()) {
                        if *a == F::zero() {
                            continue;
                        }
                        dot = dot + *a * *b;
                    }
                    scores.push(dot * scale);
                }
                let mut mx = scores[0];
                for &s in &scores {
                    if s > mx {
                        mx = s;
                    }
                }
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    sum = sum + *s;
                }
                for s in scores.iter_mut() {
                    *s = *s / sum;
                }
                let out = &mut merged[h * hd..(h + 1) * hd];
                for (s, &p) in scores.iter().enumerate() {
                    if p == F::zero() {
                        continue;
                    }
                    let vrow = &vcache[s * dh + h * hd..s * dh + (h + 1) * hd];
                    for j in 0..hd {
                        out[j] = out[j] + p * vrow[j];
                    }
                }
            }
            let mut att = vec![F::zero(); dh];
            matvec_acc(&merged, &layer.attn.wo, &mut att);
            for (ev, &av) in e.iter_mut().zip(att.iter()) {
                *ev = *ev + av;
            }
            let n2 = rmsnorm_vec(&e, layer.norm2.g.data());
            let hidden = self.cfg.mlp_hidden();
            let mut h1 = layer.mlp.b1.data().to_vec();
            matvec_acc(&n2, &layer.mlp.w1, &mut h1);
            silu_vec(&mut h1);
            let mut h2 = layer.mlp.b2.data().to_vec();
            matvec_acc(&h1, &layer.mlp.w2, &mut h2);
            for (ev, &mv) in e.iter_mut().zip(h2.iter()) {
                *ev = *ev + mv;
            }
            debug_assert_eq!(h1.len(), hidden);
        }
        self.cache.len += 1;
        self.last_hidden = e;
    }

    /// Clipped (mu, alpha) for the *next* token, read off the last position.
    pub fn next_params(&self) -> (Vec<F>, Vec<F>) {
        let d = self.cfg.dim;
        let mut out = self.w.head.b.data().to_vec();
        matvec_acc(&self.last_hidden, &self.w.head.w, &mut out);
        let c = F::from_f64(self.cfg.clip);
        let clamp = |x: F| {
            if x < -c {
                -c
            } else if x > c {
                c
            } else {
                x
            }
        };
        let mu = out[..d].iter().map(|&x| clamp(x)).collect();
        let alpha = out[d..2 * d].iter().map(|&x| clamp(x)).collect();
        (mu, alpha)
    }
}
