//! Adam with bias correction, plus the EMA shadow used for evaluation
//! weights.

use super::array::{DenseArray, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState<F: Real> {
    pub m: Vec<DenseArray<F>>,
    pub v: Vec<DenseArray<F>>,
    /// Steps rejected because a gradient was non-finite.
    pub skipped: u64,
}

impl<F: Real> AdamState<F> {
    pub fn for_params(params: &[&DenseArray<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            v: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            skipped: 0,
        }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update. `step` starts at 1. Returns `false` (and counts the
/// incident) when any gradient is non-finite; parameters are untouched then.
pub fn adam_step<F: Real>(
    params: &mut [&mut DenseArray<F>],
    grads: &[DenseArray<F>],
    state: &mut AdamState<F>,
    lr: F,
    betas: (F, F),
    step: u64,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::invalid("adam step counter starts at 1"));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    let (b1, b2) = betas;
    let one = F::one();
    let corr1 = one - b1.powi(step as i32);
    let corr2 = one - b2.powi(step as i32);
    let eps = F::from_f64(ADAM_EPS);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        debug_assert_eq!(g.len(), p.len(), "adam param/grad size");
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / corr1;
            let vhat = v[j] / corr2;
            p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(true)
}

/// ema = decay * ema + (1 - decay) * param, in place.
pub fn ema_update<F: Real>(ema: &mut [DenseArray<F>], params: &[&DenseArray<F>], decay: F) {
    let one = F::one();
    for (e, p) in ema.iter_mut().zip(params.iter()) {
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data().iter()) {
            *ev = decay * *ev + (one - decay) * pv;
        }
    }
}
