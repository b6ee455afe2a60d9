//! Exact sequential inversion of the forward flow.
//!
//! Blocks are undone in reverse order; inside a block, tokens decode one at a
//! time via `x_t = z_t * exp(alpha_t) + mu_t`, each conditioned on the tokens
//! decoded before it. Guidance extrapolates conditional against unconditional
//! predictions along three orthogonal axes: schedule (linear/constant along
//! the token dimension), space (parameters vs. decoded tokens), and mode
//! (online per step vs. offline once per block). Score-based denoising then
//! walks the output toward the clean data manifold.

pub mod kv;

pub use kv::{KvCache, TokenDecoder};

use crate::error::{Error, Result};
use crate::flow::{log_prob_taped, FlowModel};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Parameter,
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Online,
    Offline,
}

/// Full classifier-free guidance configuration for the exact inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub schedule: Schedule,
    pub space: Space,
    pub mode: Mode,
    /// Separate scale for the denoising step.
    pub denoise_scale: f64,
}

impl GuidanceSpec {
    pub fn unguided() -> Self {
        GuidanceSpec {
            scale: 0.0,
            schedule: Schedule::Linear,
            space: Space::Parameter,
            mode: Mode::Online,
            denoise_scale: 0.0,
        }
    }

    /// Per-token scale; the linear schedule restarts at every block and
    /// follows decode order, so the first decoded token is always unguided.
    pub fn token_scale(&self, t: usize, tokens: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.scale,
            Schedule::Linear => {
                if tokens <= 1 {
                    0.0
                } else {
                    t as f64 / (tokens - 1) as f64 * self.scale
                }
            }
        }
    }

    pub fn is_active(&self) -> bool {
        self.scale != 0.0
    }
}

/// `(1 + w) * cond - w * uncond`, computed as `cond + w * (cond - uncond)` so
/// equal branches return the common value exactly.
pub fn tarflow_cfg_extrapolate<F: Real>(cond: &[F], uncond: &[F], w: f64) -> Vec<F> {
    let w = F::from_f64(w);
    cond.iter()
        .zip(uncond.iter())
        .map(|(&c, &u)| c + w * (c - u))
        .collect()
}

/// Counts the work both samplers perform; the benchmark asserts these against
/// the analytic formulas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounters {
    /// Incremental conditioner token steps (per stream, per block, per token).
    pub conditioner_steps: u64,
    /// Full forward (or forward-backward half) passes used by score denoising.
    pub score_passes: u64,
    /// Reverse-model block evaluations.
    pub reverse_block_calls: u64,
}

/// Inverts the flow for a batch `z: [N, T, d]`. `labels[i]` conditions sample
/// i; guidance engages only when `guidance.scale != 0`.
///
/// Pass a pre-allocated cache to reuse its buffers (shape-checked against the
/// model); `None` allocates internally.
pub fn sequential_invert<F: Real>(
    z: &DenseArray<F>,
    labels: &[usize],
    model: &FlowModel<F>,
    guidance: &GuidanceSpec,
    cache: Option<KvCache<F>>,
    counters: &mut EvalCounters,
) -> Result<DenseArray<F>> {
    if let Some(c) = &cache {
        if !c.compatible(&model.cfg) {
            return Err(Error::invalid(
                "kv cache shape does not match the model configuration",
            ));
        }
    }
    let cfg = &model.cfg;
    let n = z.shape()[0];
    if z.shape() != [n, cfg.tokens, cfg.dim] {
        return Err(Error::shape(format!(
            "prior batch {:?} does not match token layout [{}, {}]",
            z.shape(),
            cfg.tokens,
            cfg.dim
        )));
    }
    let chunk = cfg.tokens * cfg.dim;
    let mut out = vec![F::zero(); n * chunk];
    for i in 0..n {
        let zi = &z.data()[i * chunk..(i + 1) * chunk];
        let xi = invert_sample(zi, labels[i], model, guidance, counters)?;
        out[i * chunk..(i + 1) * chunk].copy_from_slice(&xi);
    }
    DenseArray::new(vec![n, cfg.tokens, cfg.dim], out)
}

/// One sample through all blocks in reverse order, flips undone.
fn invert_sample<F: Real>(
    z: &[F],
    label: usize,
    model: &FlowModel<F>,
    guidance: &GuidanceSpec,
    counters: &mut EvalCounters,
) -> Result<Vec<F>> {
    let cfg = &model.cfg;
    let (tokens, d) = (cfg.tokens, cfg.dim);
    let mut current = z.to_vec();
    for block in (0..cfg.blocks).rev() {
        let flip = block % 2 == 1;
        if flip {
            flip_tokens(&mut current, tokens, d);
        }
        current = invert_block(&current, label, model, block, guidance, counters)?;
        if flip {
            flip_tokens(&mut current, tokens, d);
        }
    }
    Ok(current)
}

fn flip_tokens<F: Real>(x: &mut [F], tokens: usize, d: usize) {
    for t in 0..tokens / 2 {
        let (a, b) = (t * d, (tokens - 1 - t) * d);
        for j in 0..d {
            x.swap(a + j, b + j);
        }
    }
}

/// Token-by-token inversion of one block (already in the block's decode
/// order). Online guidance extrapolates at every step and feeds the guided
/// token to both streams; offline guidance decodes both streams to completion
/// on their own prefixes and extrapolates once at the end.
fn invert_block<F: Real>(
    z: &[F],
    label: usize,
    model: &FlowModel<F>,
    block: usize,
    guidance: &GuidanceSpec,
    counters: &mut EvalCounters,
) -> Result<Vec<F>> {
    let cfg = &model.cfg;
    let (tokens, d) = (cfg.tokens, cfg.dim);
    let guided = guidance.is_active();

    let mut cond = TokenDecoder::new(model, block);
    cond.feed_class(label);
    if !guided {
        let mut x = vec![F::zero(); tokens * d];
        for t in 0..tokens {
            if t > 0 {
                cond.feed_token(&x[(t - 1) * d..t * d]);
            }
            let (mu, alpha) = cond.next_params();
            decode_token(&z[t * d..(t + 1) * d], &mu, &alpha, &mut x[t * d..(t + 1) * d]);
        }
        counters.conditioner_steps += cond.steps;
        return Ok(x);
    }

    let mut uncond = TokenDecoder::new(model, block);
    uncond.feed_class(cfg.null_class());

    let result = match guidance.mode {
        Mode::Online => {
            let mut x = vec![F::zero(); tokens * d];
            for t in 0..tokens {
                if t > 0 {
                    let prev = &x[(t - 1) * d..t * d];
                    cond.feed_token(prev);
                    uncond.feed_token(prev);
                }
                let (mu_c, al_c) = cond.next_params();
                let (mu_u, al_u) = uncond.next_params();
                let w_t = guidance.token_scale(t, tokens);
                let zt = &z[t * d..(t + 1) * d];
                let slot = &mut x[t * d..(t + 1) * d];
                match guidance.space {
                    Space::Parameter => {
                        let mu = tarflow_cfg_extrapolate(&mu_c, &mu_u, w_t);
                        let al = tarflow_cfg_extrapolate(&al_c, &al_u, w_t);
                        decode_token(zt, &mu, &al, slot);
                    }
                    Space::Pixel => {
                        let mut xc = vec![F::zero(); d];
                        let mut xu = vec![F::zero(); d];
                        decode_token(zt, &mu_c, &al_c, &mut xc);
                        decode_token(zt, &mu_u, &al_u, &mut xu);
                        slot.copy_from_slice(&tarflow_cfg_extrapolate(&xc, &xu, w_t));
                    }
                }
            }
            x
        }
        Mode::Offline => {
            // Each stream decodes the whole block on its own prefix.
            let decode_full = |dec: &mut TokenDecoder<F>| {
                let mut x = vec![F::zero(); tokens * d];
                let mut mus = vec![F::zero(); tokens * d];
                let mut als = vec![F::zero(); tokens * d];
                for t in 0..tokens {
                    if t > 0 {
                        let prev = x[(t - 1) * d..t * d].to_vec();
                        dec.feed_token(&prev);
                    }
                    let (mu, alpha) = dec.next_params();
                    mus[t * d..(t + 1) * d].copy_from_slice(&mu);
                    als[t * d..(t + 1) * d].copy_from_slice(&alpha);
                    let zt = &z[t * d..(t + 1) * d];
                    let mut slot = vec![F::zero(); d];
                    decode_token(zt, &mu, &alpha, &mut slot);
                    x[t * d..(t + 1) * d].copy_from_slice(&slot);
                }
                (x, mus, als)
            };
            let (xc, mu_c, al_c) = decode_full(&mut cond);
            let (xu, mu_u, al_u) = decode_full(&mut uncond);
            let mut x = vec![F::zero(); tokens * d];
            for t in 0..tokens {
                let w_t = guidance.token_scale(t, tokens);
                let r = t * d..(t + 1) * d;
                match guidance.space {
                    Space::Parameter => {
                        let mu = tarflow_cfg_extrapolate(&mu_c[r.clone()], &mu_u[r.clone()], w_t);
                        let al = tarflow_cfg_extrapolate(&al_c[r.clone()], &al_u[r.clone()], w_t);
                        decode_token(&z[r.clone()], &mu, &al, &mut x[r]);
                    }
                    Space::Pixel => {
                        let ext = tarflow_cfg_extrapolate(&xc[r.clone()], &xu[r.clone()], w_t);
                        x[r].copy_from_slice(&ext);
                    }
                }
            }
            x
        }
    };
    counters.conditioner_steps += cond.steps + uncond.steps;
    Ok(result)
}

/// The reverse affine update: `x_t = z_t * exp(alpha_t) + mu_t`.
fn decode_token<F: Real>(z: &[F], mu: &[F], alpha: &[F], out: &mut [F]) {
    for j in 0..out.len() {
        out[j] = z[j] * alpha[j].exp() + mu[j];
    }
}

/// `x <- x_tilde + sigma^2 * score(x_tilde)`.
pub fn score_denoise<F: Real>(
    x_tilde: &DenseArray<F>,
    sigma: f64,
    score: &mut dyn FnMut(&DenseArray<F>) -> Result<DenseArray<F>>,
) -> Result<DenseArray<F>> {
    if sigma < 0.0 {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(x_tilde.clone());
    }
    let s = score(x_tilde)?;
    if !s.all_finite() {
        return Err(Error::NonFinite("score".into()));
    }
    let s2 = F::from_f64(sigma * sigma);
    crate::numerics::array::zip_broadcast(x_tilde, &s, |x, sv| x + s2 * sv)
}

/// Model score `grad log p(x_tilde | label)` via a forward-backward pass.
/// With `denoise_scale > 0` the conditional and unconditional scores are
/// extrapolated with that scale.
pub fn model_score<F: Real>(
    x_tilde: &DenseArray<F>,
    labels: &[usize],
    model: &FlowModel<F>,
    denoise_scale: f64,
    counters: &mut EvalCounters,
) -> Result<DenseArray<F>> {
    let one_pass = |labels: &[usize], counters: &mut EvalCounters| -> Result<DenseArray<F>> {
        let mut t = Tape::new();
        let bound = model.bind(&mut t, false);
        let xi = t.leaf(x_tilde.clone(), true);
        let lp = log_prob_taped(&mut t, xi, labels, &bound, &model.cfg)?;
        let total = t.sum_all(lp);
        counters.score_passes += 2; // forward + backward
        Ok(t.grad(total, &[xi])?.grads.into_iter().next().unwrap())
    };
    let cond = one_pass(labels, counters)?;
    if denoise_scale == 0.0 {
        return Ok(cond);
    }
    let null = vec![model.cfg.null_class(); labels.len()];
    let uncond = one_pass(&null, counters)?;
    let data = tarflow_cfg_extrapolate(cond.data(), uncond.data(), denoise_scale);
    DenseArray::new(cond.shape().to_vec(), data)
}

/// Draws prior noise and runs the full exact-inverse sampling pipeline:
/// sequential inversion, then score denoising when `denoise` is set.
pub fn sample_exact<F: Real>(
    n: usize,
    labels: &[usize],
    model: &FlowModel<F>,
    guidance: &GuidanceSpec,
    denoise: bool,
    rng: &mut crate::numerics::rng::Rng,
    counters: &mut EvalCounters,
) -> Result<DenseArray<F>> {
    let cfg = &model.cfg;
    let z = rng.gaussian::<F>(&[n, cfg.tokens, cfg.dim]);
    let x_tilde = sequential_invert(&z, labels, model, guidance, None, counters)?;
    if !denoise || cfg.sigma == 0.0 {
        return Ok(x_tilde);
    }
    let wd = guidance.denoise_scale;
    let mut score = |x: &DenseArray<F>| model_score(x, labels, model, wd, counters);
    score_denoise(&x_tilde, cfg.sigma, &mut score)
}

/// Full-prefix recomputation variant used to certify cache equivalence: for
/// every token the conditioner is re-run from scratch over the whole prefix.
pub fn sequential_invert_uncached<F: Real>(
    z: &DenseArray<F>,
    labels: &[usize],
    model: &FlowModel<F>,
) -> Result<DenseArray<F>> {
    let cfg = &model.cfg;
    let n = z.shape()[0];
    let chunk = cfg.tokens * cfg.dim;
    let (tokens, d) = (cfg.tokens, cfg.dim);
    let mut out = vec![F::zero(); n * chunk];
    for i in 0..n {
        let zi = &z.data()[i * chunk..(i + 1) * chunk];
        let mut current = zi.to_vec();
        for block in (0..cfg.blocks).rev() {
            let flip = block % 2 == 1;
            if flip {
                flip_tokens(&mut current, tokens, d);
            }
            let mut x = vec![F::zero(); tokens * d];
            for t in 0..tokens {
                // rebuild the whole prefix with a fresh decoder every token
                let mut dec = TokenDecoder::new(model, block);
                dec.feed_class(labels[i]);
                for s in 0..t {
                    dec.feed_token(&x[s * d..(s + 1) * d]);
                }
                let (mu, alpha) = dec.next_params();
                decode_token(&current[t * d..(t + 1) * d], &mu, &alpha, &mut x[t * d..(t + 1) * d]);
            }
            current = x;
            if flip {
                flip_tokens(&mut current, tokens, d);
            }
        }
        out[i * chunk..(i + 1) * chunk].copy_from_slice(&current);
    }
    DenseArray::new(vec![n, cfg.tokens, cfg.dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{forward_trajectory_noiseless, FlowConfig};
    use crate::numerics::rng::Rng;

    fn cfg(blocks: usize, tokens: usize, dim: usize) -> FlowConfig {
        FlowConfig {
            blocks,
            tokens,
            dim,
            layers: 1,
            width: 16,
            heads: 2,
            class_tokens: 1,
            classes: 3,
            clip: 1.0,
            sigma: 0.3,
        }
    }

    fn random_model(cfg: FlowConfig, seed: u64) -> FlowModel<f64> {
        let mut rng = Rng::new(seed);
        let mut m = FlowModel::init(cfg, &mut rng).unwrap();
        m.randomize_output_heads(&mut rng, 0.4);
        m
    }

    #[test]
    fn roundtrip_recovers_input() {
        for seed in [1u64, 2, 3] {
            let model = random_model(cfg(3, 5, 2), seed);
            let mut rng = Rng::new(100 + seed);
            let x = rng.gaussian::<f64>(&[2, 5, 2]);
            let labels = vec![0usize, 2];
            let traj = forward_trajectory_noiseless(&x, &labels, &model).unwrap();
            let mut counters = EvalCounters::default();
            let back = sequential_invert(
                traj.z(),
                &labels,
                &model,
                &GuidanceSpec::unguided(),
                None,
                &mut counters,
            )
            .unwrap();
            let err = back
                .data()
                .iter()
                .zip(x.data().iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "seed {seed}: inf err {err}");
            // per stream per sample: B * (T + K - 1) incremental steps
            assert_eq!(counters.conditioner_steps, 2 * 3 * 5);
        }
    }

    #[test]
    fn cached_equals_full_prefix_recomputation_bitwise() {
        let model = random_model(cfg(2, 6, 1), 9);
        let mut rng = Rng::new(42);
        let z = rng.gaussian::<f64>(&[2, 6, 1]);
        let labels = vec![1usize, 0];
        let mut counters = EvalCounters::default();
        let cached = sequential_invert(
            &z,
            &labels,
            &model,
            &GuidanceSpec::unguided(),
            None,
            &mut counters,
        )
        .unwrap();
        let full = sequential_invert_uncached(&z, &labels, &model).unwrap();
        assert_eq!(cached.data(), full.data(), "cache changed the decode");

        // Same property at 32-bit.
        let model32 = {
            let mut rng = Rng::new(9);
            let mut m = FlowModel::<f32>::init(cfg(2, 6, 1), &mut rng).unwrap();
            m.randomize_output_heads(&mut rng, 0.4);
            m
        };
        let z32 = z.cast::<f32>();
        let cached32 = sequential_invert(
            &z32,
            &labels,
            &model32,
            &GuidanceSpec::unguided(),
            None,
            &mut counters,
        )
        .unwrap();
        let full32 = sequential_invert_uncached(&z32, &labels, &model32).unwrap();
        assert_eq!(cached32.data(), full32.data());
    }

    #[test]
    fn w_zero_matches_unguided_for_all_variants() {
        let model = random_model(cfg(2, 4, 1), 5);
        let mut rng = Rng::new(7);
        let z = rng.gaussian::<f64>(&[1, 4, 1]);
        let labels = vec![2usize];
        let mut c = EvalCounters::default();
        let base = sequential_invert(&z, &labels, &model, &GuidanceSpec::unguided(), None, &mut c)
            .unwrap();
        for schedule in [Schedule::Linear, Schedule::Constant] {
            for space in [Space::Parameter, Space::Pixel] {
                for mode in [Mode::Online, Mode::Offline] {
                    let g = GuidanceSpec {
                        scale: 0.0,
                        schedule,
                        space,
                        mode,
                        denoise_scale: 0.0,
                    };
                    let out =
                        sequential_invert(&z, &labels, &model, &g, None, &mut c).unwrap();
                    assert_eq!(out.data(), base.data(), "{schedule:?}/{space:?}/{mode:?}");
                }
            }
        }
    }

    #[test]
    fn linear_schedule_first_token_unguided() {
        assert_eq!(
            GuidanceSpec {
                scale: 2.8,
                ..GuidanceSpec::unguided()
            }
            .token_scale(0, 8),
            0.0
        );
        // degenerate single-token layout
        assert_eq!(
            GuidanceSpec {
                scale: 2.8,
                ..GuidanceSpec::unguided()
            }
            .token_scale(0, 1),
            0.0
        );
    }

    #[test]
    fn extrapolation_arithmetic() {
        // w = 0 returns cond; equal branches return either; Table-12-style
        // scale 2.8: (1 + 2.8) * 1 - 2.8 * 0 = 3.8.
        assert_eq!(tarflow_cfg_extrapolate(&[1.0f64], &[0.0], 0.0), vec![1.0]);
        assert_eq!(tarflow_cfg_extrapolate(&[0.7f64], &[0.7], 5.0), vec![0.7]);
        let got = tarflow_cfg_extrapolate(&[1.0f64], &[0.0], 2.8);
        assert!((got[0] - 3.8).abs() < 1e-12);
    }

    #[test]
    fn score_denoise_identity_and_analytic_scores() {
        let mut rng = Rng::new(11);
        let x = rng.gaussian::<f64>(&[4, 2, 1]);
        // sigma = 0 is the identity
        let out = score_denoise(&x, 0.0, &mut |_| unreachable!()).unwrap();
        assert_eq!(out.data(), x.data());
        // standard-normal score s(x) = -x gives (1 - sigma^2) x
        let sigma = 0.3;
        let out = score_denoise(&x, sigma, &mut |v| Ok(v.map(|a| -a))).unwrap();
        for (o, i) in out.data().iter().zip(x.data().iter()) {
            assert!((o - (1.0 - sigma * sigma) * i).abs() < 1e-12);
        }
        // non-finite score is an error
        let res = score_denoise(&x, 0.5, &mut |v| Ok(v.map(|_| f64::NAN)));
        assert!(res.is_err());
    }

    #[test]
    fn score_denoise_mixture_oracle() {
        // Two-component mixture p = pi1 N(m1, s1^2) + pi2 N(m2, s2^2) with the
        // closed-form score; output must match x + sigma^2 * score to 1e-10.
        let (pi1, m1, s1) = (0.3, -1.0, 0.5);
        let (pi2, m2, s2) = (0.7, 2.0, 1.2);
        let gauss = |x: f64, m: f64, s: f64| {
            (-((x - m) * (x - m)) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let score = move |x: f64| {
            let p1 = pi1 * gauss(x, m1, s1);
            let p2 = pi2 * gauss(x, m2, s2);
            (p1 * (-(x - m1) / (s1 * s1)) + p2 * (-(x - m2) / (s2 * s2))) / (p1 + p2)
        };
        let sigma = 0.3;
        let mut rng = Rng::new(13);
        let x = rng.uniform::<f64>(&[8, 1, 1], -3.0, 4.0);
        let out = score_denoise(&x, sigma, &mut |v| Ok(v.map(|a| score(a)))).unwrap();
        for (o, &i) in out.data().iter().zip(x.data().iter()) {
            let expect = i + sigma * sigma * score(i);
            assert!((o - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn denoising_affine_in_score() {
        // denoise(x, sigma, a*s1 + b*s2) = x + sigma^2 (a s1(x) + b s2(x))
        let mut rng = Rng::new(17);
        let x = rng.gaussian::<f64>(&[3, 2, 1]);
        let (a, b) = (0.4, -1.7);
        let s1 = |v: &DenseArray<f64>| v.map(|t| t.sin());
        let s2 = |v: &DenseArray<f64>| v.map(|t| t * t);
        let sigma = 0.7;
        let combined = score_denoise(&x, sigma, &mut |v| {
            let (x1, x2) = (s1(v), s2(v));
            Ok(crate::numerics::array::zip_broadcast(&x1, &x2, |p, q| a * p + b * q).unwrap())
        })
        .unwrap();
        for (i, (&o, &xi)) in combined.data().iter().zip(x.data().iter()).enumerate() {
            let expect = xi + sigma * sigma * (a * xi.sin() + b * xi * xi);
            assert!((o - expect).abs() < 1e-12, "entry {i}");
        }
    }

    #[test]
    fn mismatched_cache_rejected() {
        let model = random_model(cfg(2, 4, 1), 3);
        let other = cfg(2, 4, 1);
        let bad = KvCache::<f64>::new(other.layers + 1, other.width, 8);
        let mut c = EvalCounters::default();
        let mut rng = Rng::new(1);
        let z = rng.gaussian::<f64>(&[1, 4, 1]);
        let res = sequential_invert(
            &z,
            &[0],
            &model,
            &GuidanceSpec::unguided(),
            Some(bad),
            &mut c,
        );
        assert!(res.is_err());
    }

    #[test]
    fn guided_roundtrip_differs_but_w0_roundtrips() {
        // guidance shifts outputs away from the unguided inverse
        let model = random_model(cfg(2, 4, 1), 21);
        let mut rng = Rng::new(2);
        let z = rng.gaussian::<f64>(&[1, 4, 1]);
        let mut c = EvalCounters::default();
        let base =
            sequential_invert(&z, &[1], &model, &GuidanceSpec::unguided(), None, &mut c).unwrap();
        let g = GuidanceSpec {
            scale: 1.5,
            schedule: Schedule::Constant,
            space: Space::Parameter,
            mode: Mode::Online,
            denoise_scale: 0.0,
        };
        let guided = sequential_invert(&z, &[1], &model, &g, None, &mut c).unwrap();
        assert_ne!(base.data(), guided.data());
    }
}
