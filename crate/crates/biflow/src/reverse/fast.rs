//! Untaped reverse-block evaluation for inference.
//!
//! `reverse_pass` is pure feedforward compute with no gradients, so it runs
//! on flat buffers instead of the tape, with scratch space reused across
//! rows, layers, and blocks. Reduction orders follow the taped block (same
//! matvec, norm, softmax, and head-merge orders), keeping the two
//! implementations numerically aligned.

use crate::error::Result;
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::nn::RMS_EPS;
use crate::numerics::vecmath::{matvec_acc, silu_vec};

use super::{ReverseBlock, ReverseConfig, ReverseModel};

struct Scratch<F> {
    seq: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    merged: Vec<F>,
    n1: Vec<F>,
    att: Vec<F>,
    h1: Vec<F>,
    h2: Vec<F>,
    scores: Vec<F>,
}

impl<F: Real> Scratch<F> {
    fn new(cfg: &ReverseConfig) -> Self {
        let s = cfg.class_tokens + ReverseConfig::GUIDANCE_TOKENS + cfg.tokens;
        let w = cfg.width;
        Scratch {
            seq: vec![F::zero(); s * w],
            q: vec![F::zero(); s * w],
            k: vec![F::zero(); s * w],
            v: vec![F::zero(); s * w],
            merged: vec![F::zero(); s * w],
            n1: vec![F::zero(); w],
            att: vec![F::zero(); w],
            h1: vec![F::zero(); cfg.mlp_hidden()],
            h2: vec![F::zero(); w],
            scores: vec![F::zero(); s],
        }
    }
}

fn rmsnorm_into<F: Real>(x: &[F], g: &[F], out: &mut [F]) {
    let dim = x.len();
    let sum: F = x.iter().map(|&v| v * v).sum();
    let mean = sum * (F::one() / F::from_usize(dim));
    let rms = (mean + F::from_f64(RMS_EPS)).sqrt();
    for ((o, &v), &gv) in out.iter_mut().zip(x.iter()).zip(g.iter()) {
        *o = v / rms * gv;
    }
}

fn fill_zero<F: Real>(buf: &mut [F]) {
    for v in buf.iter_mut() {
        *v = F::zero();
    }
}

/// One sample through one block: `x` is `T * in_dim`, output `T * out_dim`.
/// `prefix` holds the conditioning rows (class tokens then the two guidance
/// tokens), already at trunk width.
fn block_forward_fast<F: Real>(
    blk: &ReverseBlock<DenseArray<F>>,
    x: &[F],
    prefix: &[Vec<F>],
    cfg: &ReverseConfig,
    sc: &mut Scratch<F>,
) -> Vec<F> {
    let w = cfg.width;
    let tokens = cfg.tokens;
    let in_dim = x.len() / tokens;
    let out_dim = blk.out.w.shape()[1];
    let s = prefix.len() + tokens;
    let heads = cfg.heads;
    let hd = w / heads;
    let scale = F::one() / F::from_f64((hd as f64).sqrt());

    // sequence rows: prefix tokens, then embedded data tokens, plus positions
    for (p, row) in prefix.iter().enumerate() {
        let dst = &mut sc.seq[p * w..(p + 1) * w];
        let pos = &blk.pos.data()[p * w..(p + 1) * w];
        for j in 0..w {
            dst[j] = row[j] + pos[j];
        }
    }
    for t in 0..tokens {
        let p = prefix.len() + t;
        let dst = &mut sc.seq[p * w..(p + 1) * w];
        dst.copy_from_slice(blk.inp.b.data());
        matvec_acc(&x[t * in_dim..(t + 1) * in_dim], &blk.inp.w, dst);
        let pos = &blk.pos.data()[p * w..(p + 1) * w];
        for j in 0..w {
            dst[j] = dst[j] + pos[j];
        }
    }

    for layer in &blk.layers {
        fill_zero(&mut sc.q[..s * w]);
        fill_zero(&mut sc.k[..s * w]);
        fill_zero(&mut sc.v[..s * w]);
        fill_zero(&mut sc.merged[..s * w]);
        for p in 0..s {
            rmsnorm_into(&sc.seq[p * w..(p + 1) * w], layer.norm1.g.data(), &mut sc.n1);
            matvec_acc(&sc.n1, &layer.attn.wq, &mut sc.q[p * w..(p + 1) * w]);
            matvec_acc(&sc.n1, &layer.attn.wk, &mut sc.k[p * w..(p + 1) * w]);
            matvec_acc(&sc.n1, &layer.attn.wv, &mut sc.v[p * w..(p + 1) * w]);
        }
        for h in 0..heads {
            let off = h * hd;
            for p in 0..s {
                let qh = &sc.q[p * w + off..p * w + off + hd];
                for j in 0..s {
                    let kh = &sc.k[j * w + off..j * w + off + hd];
                    let mut dot = F::zero();
                    for (a, b) in qh.iter().zip(kh.iter()) {
                        dot = dot + *a * *b;
                    }
                    sc.scores[j] = dot * scale;
                }
                let scores = &mut sc.scores[..s];
                let mut mx = scores[0];
                for &v in scores.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = F::zero();
                for v in scores.iter_mut() {
                    *v = (*v - mx).exp();
                    sum = sum + *v;
                }
                for v in scores.iter_mut() {
                    *v = *v / sum;
                }
                let out = &mut sc.merged[p * w + off..p * w + off + hd];
                for (j, &pv) in scores.iter().enumerate() {
                    let vh = &sc.v[j * w + off..j * w + off + hd];
                    for d in 0..hd {
                        out[d] = out[d] + pv * vh[d];
                    }
                }
            }
        }
        for p in 0..s {
            fill_zero(&mut sc.att);
            matvec_acc(&sc.merged[p * w..(p + 1) * w], &layer.attn.wo, &mut sc.att);
            let row = &mut sc.seq[p * w..(p + 1) * w];
            for j in 0..w {
                row[j] = row[j] + sc.att[j];
            }
            rmsnorm_into(row, layer.norm2.g.data(), &mut sc.n1);
            sc.h1.copy_from_slice(layer.mlp.b1.data());
            matvec_acc(&sc.n1, &layer.mlp.w1, &mut sc.h1);
            silu_vec(&mut sc.h1);
            sc.h2.copy_from_slice(layer.mlp.b2.data());
            matvec_acc(&sc.h1, &layer.mlp.w2, &mut sc.h2);
            for j in 0..w {
                row[j] = row[j] + sc.h2[j];
            }
        }
    }

    // data positions -> out projection + skip(x)
    let mut out = vec![F::zero(); tokens * out_dim];
    for t in 0..tokens {
        let p = prefix.len() + t;
        let slot = &mut out[t * out_dim..(t + 1) * out_dim];
        slot.copy_from_slice(blk.skip.b.data());
        matvec_acc(&x[t * in_dim..(t + 1) * in_dim], &blk.skip.w, slot);
        let mut delta = blk.out.b.data().to_vec();
        matvec_acc(&sc.seq[p * w..(p + 1) * w], &blk.out.w, &mut delta);
        for j in 0..out_dim {
            slot[j] = slot[j] + delta[j];
        }
    }
    out
}

/// Conditioning rows shared across blocks: class tokens for `label`, then
/// the embedded w and w_d tokens.
fn prefix_rows<F: Real>(model: &ReverseModel<F>, label: usize, w: f64, w_d: f64) -> Vec<Vec<F>> {
    let cfg = &model.cfg;
    let width = cfg.width;
    let mut rows = Vec::with_capacity(cfg.class_tokens + 2);
    for j in 0..cfg.class_tokens {
        let base = (label * cfg.class_tokens + j) * width;
        rows.push(model.cls.data()[base..base + width].to_vec());
    }
    for (val, lin) in [(w, &model.w_embed), (w_d, &model.wd_embed)] {
        let mut row = lin.b.data().to_vec();
        matvec_acc(&[F::from_f64(val)], &lin.w, &mut row);
        rows.push(row);
    }
    rows
}

/// Untaped full pass for one sample; returns (hiddens, reconstruction).
pub(crate) fn sample_pass_fast<F: Real>(
    model: &ReverseModel<F>,
    z: &[F],
    label: usize,
    w: f64,
    w_d: f64,
) -> Result<(Vec<Vec<F>>, Vec<F>)> {
    let prefix = prefix_rows(model, label, w, w_d);
    let mut scratch = Scratch::new(&model.cfg);
    let mut state = z.to_vec();
    let mut hiddens = Vec::with_capacity(model.cfg.forward_blocks);
    for blk in &model.blocks {
        state = block_forward_fast(blk, &state, &prefix, &model.cfg, &mut scratch);
        hiddens.push(state.clone());
    }
    let recon = match &model.denoise {
        Some(d) => block_forward_fast(d, &state, &prefix, &model.cfg, &mut scratch),
        None => state,
    };
    Ok((hiddens, recon))
}
