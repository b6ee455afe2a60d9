//! Distillation losses, adaptive weighting, and trajectory normalization.
//!
//! Three supervision strategies for the reverse model: naive (final
//! reconstruction only), hidden distillation (every hidden matched to its
//! forward state in input space), and hidden alignment (projected hiddens
//! matched to forward states). Per-term weights follow the adaptive rule
//! `(D + c_hat)^(-p)` applied as constants in the backward pass.

use crate::error::{Error, Result};
use crate::flow::ForwardTrajectory;
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::kernels;
use crate::numerics::nn::Linear;
use crate::numerics::tape::{Id, Tape};

use super::ReverseTrajectory;

/// A registered distance metric. `per_sample` returns `[N]` distances on the
/// tape so losses can be adaptively weighted per sample. Feature-space
/// metrics plug in by implementing this trait and registering a name in
/// [`metric_by_name`].
pub trait Distance<F: Real> {
    fn name(&self) -> &'static str;
    fn per_sample(&self, t: &mut Tape<F>, a: Id, b: Id) -> Id;
}

/// Mean squared error over each sample's entries.
pub struct Mse;

impl<F: Real> Distance<F> for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn per_sample(&self, t: &mut Tape<F>, a: Id, b: Id) -> Id {
        let d = t.sub(a, b);
        let sq = t.mul(d, d);
        t.mean_trailing(sq)
    }
}

/// Summed squared error (no mean) over each sample's entries.
pub struct Sse;

impl<F: Real> Distance<F> for Sse {
    fn name(&self) -> &'static str {
        "sse"
    }
    fn per_sample(&self, t: &mut Tape<F>, a: Id, b: Id) -> Id {
        let d = t.sub(a, b);
        let sq = t.mul(d, d);
        t.sum_trailing(sq)
    }
}

pub fn metric_by_name<F: Real>(name: &str) -> Result<Box<dyn Distance<F>>> {
    match name {
        "mse" => Ok(Box::new(Mse)),
        "sse" => Ok(Box::new(Sse)),
        other => Err(Error::invalid(format!(
            "unknown distance metric '{other}' (registered: mse, sse)"
        ))),
    }
}

fn batch_distance<F: Real>(a: &DenseArray<F>, b: &DenseArray<F>, metric: &dyn Distance<F>) -> F {
    let mut t = Tape::new();
    let ai = t.leaf(a.clone(), false);
    let bi = t.leaf(b.clone(), false);
    let per = metric.per_sample(&mut t, ai, bi);
    let m = t.mean_all(per);
    t.value(m).item()
}

/// Final-output distillation: `D(x, x')`.
pub fn naive_loss<F: Real>(
    x: &DenseArray<F>,
    x_prime: &DenseArray<F>,
    metric: &dyn Distance<F>,
) -> Result<F> {
    if x.shape() != x_prime.shape() {
        return Err(Error::shape(format!(
            "naive_loss shapes {:?} vs {:?}",
            x.shape(),
            x_prime.shape()
        )));
    }
    Ok(batch_distance(x, x_prime, metric))
}

/// Trajectory distillation in input space: `sum_i D(x^i, h^i)`, including the
/// `h^0` term.
pub fn hidden_distill_loss<F: Real>(
    forward: &ForwardTrajectory<F>,
    reverse: &ReverseTrajectory<F>,
    metric: &dyn Distance<F>,
) -> Result<F> {
    let b = reverse.hiddens.len();
    if forward.states.len() != b + 1 {
        return Err(Error::shape(format!(
            "trajectory length mismatch: forward has {} states, reverse {} hiddens",
            forward.states.len(),
            b
        )));
    }
    let mut total = F::zero();
    for i in 0..b {
        let h = reverse.hidden_for_state(i);
        if h.shape() != forward.states[i].shape() {
            return Err(Error::shape(format!(
                "hidden for state {i} has shape {:?}, expected {:?}",
                h.shape(),
                forward.states[i].shape()
            )));
        }
        total = total + batch_distance(&forward.states[i], h, metric);
    }
    Ok(total)
}

/// Trajectory alignment through projection heads: `sum_i D(x^i, phi_i(h^i))`
/// with `phi_0` the identity.
pub fn hidden_align_loss<F: Real>(
    forward: &ForwardTrajectory<F>,
    reverse: &ReverseTrajectory<F>,
    heads: &[Linear<DenseArray<F>>],
    metric: &dyn Distance<F>,
) -> Result<F> {
    let b = reverse.hiddens.len();
    if forward.states.len() != b + 1 {
        return Err(Error::shape("trajectory length mismatch".to_string()));
    }
    if b > 0 && heads.len() != b - 1 {
        return Err(Error::shape(format!(
            "expected {} projection heads, got {}",
            b - 1,
            heads.len()
        )));
    }
    let mut total = F::zero();
    for i in 0..b {
        let h = reverse.hidden_for_state(i);
        let projected = if i == 0 {
            h.clone()
        } else {
            let head = &heads[i - 1];
            if head.w.shape()[0] != *h.shape().last().unwrap() {
                return Err(Error::shape(format!(
                    "head {i} maps width {}, hidden has {}",
                    head.w.shape()[0],
                    h.shape().last().unwrap()
                )));
            }
            let mut t = Tape::new();
            let hi = t.leaf(h.clone(), false);
            let wi = t.leaf(head.w.clone(), false);
            let bi = t.leaf(head.b.clone(), false);
            let y = t.matmul(hi, wi);
            let y = t.add(y, bi);
            t.value(y).clone()
        };
        total = total + batch_distance(&forward.states[i], &projected, metric);
    }
    Ok(total)
}

/// `(d + c_hat)^(-p)`; the caller multiplies it in as a constant
/// (stop-gradient semantics).
pub fn adaptive_weight(d: f64, c_hat: f64, p: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::invalid("adaptive weight needs a non-negative residual"));
    }
    if c_hat <= 0.0 || p < 0.0 {
        return Err(Error::invalid("require c_hat > 0 and p >= 0"));
    }
    Ok((d + c_hat).powf(-p))
}

/// Per-sample adaptive weighting on the tape: weights are computed from the
/// current values of `per_sample` and attached as constants, so the gradient
/// of the weighted mean is weight times the unweighted gradient.
pub fn adaptive_weighted_mean<F: Real>(
    t: &mut Tape<F>,
    per_sample: Id,
    c_hat: f64,
    p: f64,
) -> Id {
    let weights: Vec<F> = t
        .value(per_sample)
        .data()
        .iter()
        .map(|&d| F::from_f64((Real::to_f64(d).max(0.0) + c_hat).powf(-p)))
        .collect();
    let wconst = t.constant(DenseArray::from_vec(weights));
    let weighted = t.mul(per_sample, wconst);
    t.mean_all(weighted)
}

/// Per-state mean squared norm `E[||x^i||^2]` over a set of trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats {
    pub mean_sq_norm: Vec<f64>,
}

impl TrajectoryStats {
    pub fn rms(&self, state: usize) -> f64 {
        self.mean_sq_norm[state].sqrt()
    }

    /// Accumulates the statistic over batches of forward trajectories.
    pub fn from_trajectories<F: Real>(trajs: &[ForwardTrajectory<F>]) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::invalid("no trajectories given"));
        }
        let states = trajs[0].states.len();
        let mut sums = vec![0.0f64; states];
        let mut count = 0usize;
        for traj in trajs {
            let n = traj.states[0].shape()[0];
            count += n;
            for (i, s) in traj.states.iter().enumerate() {
                let sq = s.map(|v| v * v);
                let per = kernels::sum_trailing(&sq);
                sums[i] += per.data().iter().map(|&v| Real::to_f64(v)).sum::<f64>();
            }
        }
        Ok(TrajectoryStats {
            mean_sq_norm: sums.into_iter().map(|s| s / count as f64).collect(),
        })
    }
}

/// Scales each state by `1 / sqrt(E[||x^i||^2])`; the normalized dataset-mean
/// squared norm per state is 1.
pub fn trajectory_normalize<F: Real>(
    traj: &ForwardTrajectory<F>,
    stats: &TrajectoryStats,
) -> Result<ForwardTrajectory<F>> {
    if stats.mean_sq_norm.len() != traj.states.len() {
        return Err(Error::shape("stats/trajectory state count mismatch".to_string()));
    }
    if stats.mean_sq_norm.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("zero norm statistic"));
    }
    let states = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let inv = F::from_f64(1.0 / stats.rms(i));
            s.map(|v| v * inv)
        })
        .collect();
    Ok(ForwardTrajectory {
        states,
        logdet: traj.logdet.clone(),
    })
}
