//! Reverse-model training against a frozen forward flow.
//!
//! Each step draws a batch, computes the forward trajectory (with noise
//! injection) under the frozen flow, samples per-sample guidance scales, and
//! runs the dual-branch guided pass: every block evaluates a conditional and
//! a stop-gradiented unconditional branch, propagates the guided
//! extrapolation, and is supervised on the recovered unguided output against
//! the forward state. Label-dropped samples run with the null class and a
//! zero extrapolation scale, which is what trains the unconditional branch.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::train::MetricLog;
use crate::flow::{forward_trajectory, FlowModel};
use crate::inverse::EvalCounters;
use crate::numerics::adam::{adam_step, ema_update, AdamState};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::nn::linear_fwd;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Id, Tape};

use super::guidance::guided_step;
use super::losses::{adaptive_weighted_mean, metric_by_name, TrajectoryStats};
use super::{reverse_pass, taped_block_fwd, taped_cond_tokens, HiddenMode, ReverseModel};

const MAX_CONSECUTIVE_SKIPS: u32 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Naive,
    HiddenDistill,
    HiddenAlign,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Strategy::Naive),
            "hidden_distill" => Ok(Strategy::HiddenDistill),
            "hidden_align" => Ok(Strategy::HiddenAlign),
            other => Err(Error::invalid(format!("unknown strategy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::HiddenDistill => "hidden_distill",
            Strategy::HiddenAlign => "hidden_align",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryNorm {
    None,
    /// Rely on the forward model's parameter clipping; no rescaling.
    ClipAssumed,
    /// Divide alignment targets by their dataset RMS.
    Normalized,
}

impl TrajectoryNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TrajectoryNorm::None),
            "clip_assumed" => Ok(TrajectoryNorm::ClipAssumed),
            "normalized" => Ok(TrajectoryNorm::Normalized),
            other => Err(Error::invalid(format!("unknown trajectory_norm '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub strategy: Strategy,
    /// Adaptive exponent p (>= 0; 0 disables reweighting).
    pub adaptive_p: f64,
    /// Adaptive offset c_hat (> 0).
    pub adaptive_offset: f64,
    /// Optional per-term weights for the B alignment terms; all ones when absent.
    pub term_weights: Option<Vec<f64>>,
    pub trajectory_norm: TrajectoryNorm,
    pub metric: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            strategy: Strategy::HiddenAlign,
            adaptive_p: 2.0,
            adaptive_offset: 1e-3,
            term_weights: None,
            trajectory_norm: TrajectoryNorm::ClipAssumed,
            metric: "mse".into(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adaptive_p < 0.0 {
            return Err(Error::invalid("adaptive exponent must be >= 0"));
        }
        if self.adaptive_offset <= 0.0 {
            return Err(Error::invalid("adaptive offset must be > 0"));
        }
        Ok(())
    }
}

/// Uniform priors the per-sample guidance scales are drawn from.
#[derive(Clone, Copy, Debug)]
pub struct GuidancePrior {
    pub w_max: f64,
    pub wd_max: f64,
}

impl Default for GuidancePrior {
    fn default() -> Self {
        GuidancePrior {
            w_max: 1.0,
            wd_max: 8.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReverseConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub batch: usize,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub label_drop: f64,
}

impl Default for TrainReverseConfig {
    fn default() -> Self {
        TrainReverseConfig {
            lr: 4e-4,
            betas: (0.9, 0.95),
            epochs: 10,
            batch: 256,
            warmup_steps: 100,
            ema_decay: 0.9999,
            label_drop: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedReverse<F: Real> {
    pub model: ReverseModel<F>,
    pub ema: Vec<DenseArray<F>>,
    pub log: MetricLog,
    pub stats: Option<TrajectoryStats>,
    pub steps: u64,
    pub skipped_steps: u64,
}

impl<F: Real> TrainedReverse<F> {
    pub fn ema_model(&self) -> ReverseModel<F> {
        self.model.with_params(&self.ema)
    }
}

/// Trains the reverse model. The forward model is frozen: its parameters
/// never join the training tape, so no gradient can reach them by
/// construction.
///
/// `eval_set`, when given, is reconstructed at the end of every epoch at
/// `w = w_d = 0` and logged as `recon_mse_eval`.
pub fn train_reverse<F: Real>(
    dataset: &Dataset<F>,
    forward_frozen: &FlowModel<F>,
    mut model: ReverseModel<F>,
    loss_cfg: &LossConfig,
    prior: &GuidancePrior,
    opt: &TrainReverseConfig,
    eval_set: Option<&Dataset<F>>,
    rng: &mut Rng,
) -> Result<TrainedReverse<F>> {
    loss_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if loss_cfg.strategy == Strategy::HiddenDistill
        && model.cfg.hidden_mode != HiddenMode::InputSpace
    {
        return Err(Error::invalid(
            "hidden distillation requires input-space reverse blocks",
        ));
    }
    let b = model.cfg.forward_blocks;
    if forward_frozen.cfg.blocks != b {
        return Err(Error::shape("forward/reverse block count mismatch".to_string()));
    }
    let term_weights = match &loss_cfg.term_weights {
        Some(w) if w.len() != b => {
            return Err(Error::invalid(format!(
                "expected {b} term weights, got {}",
                w.len()
            )))
        }
        Some(w) => w.clone(),
        None => vec![1.0; b],
    };
    let metric = metric_by_name::<F>(&loss_cfg.metric)?;

    // Normalization statistics over the dataset, with the same noise model.
    let stats = if loss_cfg.trajectory_norm == TrajectoryNorm::Normalized {
        let mut stat_rng = rng.split();
        let mut trajs = Vec::new();
        let idx: Vec<usize> = (0..dataset.len()).collect();
        for chunk in idx.chunks(256) {
            let (x, labels) = dataset.gather(chunk);
            trajs.push(forward_trajectory(&x, &labels, forward_frozen, &mut stat_rng)?);
        }
        Some(TrajectoryStats::from_trajectories(&trajs)?)
    } else {
        None
    };

    let mut header = vec!["step".to_string(), "loss_total".to_string()];
    for i in 0..b {
        header.push(format!("loss_align_{i}"));
    }
    header.extend(
        ["loss_recon", "w_mean", "wd_mean", "recon_mse_eval"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut log = MetricLog::new(header);

    let mut ema = model.param_values();
    let mut adam = AdamState::for_params(&model.params());
    let mut step = 0u64;
    let mut consecutive_skips = 0u32;
    let mut total_skips = 0u64;
    let n = dataset.len();
    let batch = opt.batch.min(n).max(1);
    let null = model.cfg.null_class();
    let has_denoise = model.cfg.denoise;
    let mut eval_rng = rng.split();

    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..opt.epochs {
        rng.shuffle(&mut order);
        let mut acc_total = 0.0;
        let mut acc_terms = vec![0.0f64; b];
        let mut acc_recon = 0.0;
        let mut acc_w = 0.0;
        let mut acc_wd = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(batch) {
            step += 1;
            let (x, labels) = dataset.gather(chunk);
            let nb = labels.len();
            let dropped: Vec<bool> = (0..nb).map(|_| rng.coin(opt.label_drop)).collect();
            let labels_eff: Vec<usize> = labels
                .iter()
                .zip(&dropped)
                .map(|(&l, &d)| if d { null } else { l })
                .collect();

            let traj = forward_trajectory(&x, &labels_eff, forward_frozen, rng)?;

            let w: Vec<f64> = (0..nb).map(|_| rng.uniform_scalar(0.0, prior.w_max)).collect();
            let wd: Vec<f64> = (0..nb).map(|_| rng.uniform_scalar(0.0, prior.wd_max)).collect();
            let w_eff: Vec<f64> = w
                .iter()
                .zip(&dropped)
                .map(|(&v, &d)| if d { 0.0 } else { v })
                .collect();
            let wd_eff: Vec<f64> = wd
                .iter()
                .zip(&dropped)
                .map(|(&v, &d)| if d { 0.0 } else { v })
                .collect();

            let mut tape = Tape::new();
            let (bound, param_ids) = model.bind_trainable(&mut tape);
            let cond_c = taped_cond_tokens(&mut tape, &bound, &labels_eff, &w, &wd, &model.cfg);
            let null_labels = vec![null; nb];
            let cond_u = taped_cond_tokens(&mut tape, &bound, &null_labels, &w, &wd, &model.cfg);

            let w_eff_id = per_sample_scale(&mut tape, &w_eff);
            let wd_eff_id = per_sample_scale(&mut tape, &wd_eff);

            // alignment targets, optionally RMS-normalized
            let target_for = |i: usize| -> DenseArray<F> {
                match &stats {
                    Some(s) => {
                        let inv = F::from_f64(1.0 / s.rms(i));
                        traj.states[i].map(|v| v * inv)
                    }
                    None => traj.states[i].clone(),
                }
            };

            let zi = tape.leaf(traj.z().clone(), false);
            let mut s = zi;
            let mut term_vals = vec![0.0f64; b];
            let mut term_ids: Vec<Option<Id>> = vec![None; b];
            for (j, blk) in bound.blocks.iter().enumerate() {
                let out_c = taped_block_fwd(&mut tape, s, &cond_c, blk, &model.cfg);
                let out_u = taped_block_fwd(&mut tape, s, &cond_u, blk, &model.cfg);
                let (guided, recovered) = guided_step(&mut tape, out_c, out_u, w_eff_id);
                let state_i = b - 1 - j;
                if loss_cfg.strategy != Strategy::Naive {
                    let pred = project_to_input(&mut tape, recovered, state_i, &bound, &model.cfg);
                    let tgt = tape.constant(target_for(state_i));
                    let per = metric.per_sample(&mut tape, tgt, pred);
                    let term = adaptive_weighted_mean(
                        &mut tape,
                        per,
                        loss_cfg.adaptive_offset,
                        loss_cfg.adaptive_p,
                    );
                    let weighted = tape.scale(term, F::from_f64(term_weights[state_i]));
                    term_vals[state_i] = Real::to_f64(tape.value(weighted).item());
                    term_ids[state_i] = Some(weighted);
                } else if state_i == 0 && !has_denoise {
                    // naive without a denoise block: supervise the final output
                    let tgt = tape.constant(target_for(0));
                    let per = metric.per_sample(&mut tape, tgt, recovered);
                    let term = adaptive_weighted_mean(
                        &mut tape,
                        per,
                        loss_cfg.adaptive_offset,
                        loss_cfg.adaptive_p,
                    );
                    term_vals[0] = Real::to_f64(tape.value(term).item());
                    term_ids[0] = Some(term);
                }
                s = guided;
            }

            // reconstruction term through the denoise block
            let mut recon_val = 0.0;
            let mut recon_id: Option<Id> = None;
            if let Some(dblk) = &bound.denoise {
                let out_c = taped_block_fwd(&mut tape, s, &cond_c, dblk, &model.cfg);
                let out_u = taped_block_fwd(&mut tape, s, &cond_u, dblk, &model.cfg);
                let (_, recovered_x) = guided_step(&mut tape, out_c, out_u, wd_eff_id);
                let tgt = tape.constant(x.clone());
                let per = metric.per_sample(&mut tape, tgt, recovered_x);
                let term = adaptive_weighted_mean(
                    &mut tape,
                    per,
                    loss_cfg.adaptive_offset,
                    loss_cfg.adaptive_p,
                );
                recon_val = Real::to_f64(tape.value(term).item());
                recon_id = Some(term);
            }

            let mut all_terms: Vec<Id> = term_ids.iter().flatten().copied().collect();
            if let Some(r) = recon_id {
                all_terms.push(r);
            }
            let mut loss = *all_terms.first().expect("at least one loss term");
            for &id in &all_terms[1..] {
                loss = tape.add(loss, id);
            }

            let loss_val = Real::to_f64(tape.value(loss).item());
            if !loss_val.is_finite() {
                consecutive_skips += 1;
                total_skips += 1;
                if consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::TrainingAborted(format!(
                        "{consecutive_skips} consecutive non-finite losses"
                    )));
                }
                continue;
            }
            consecutive_skips = 0;

            let grads = tape.grad(loss, &param_ids)?.grads;
            let lr_t = if opt.warmup_steps == 0 {
                opt.lr
            } else {
                opt.lr * (step as f64 / opt.warmup_steps as f64).min(1.0)
            };
            {
                let mut params: Vec<&mut DenseArray<F>> = Vec::new();
                model.visit_mut(&mut |_, p| params.push(p));
                adam_step(
                    &mut params,
                    &grads,
                    &mut adam,
                    F::from_f64(lr_t),
                    (F::from_f64(opt.betas.0), F::from_f64(opt.betas.1)),
                    step,
                )?;
            }
            ema_update(&mut ema, &model.params(), F::from_f64(opt.ema_decay));

            acc_total += loss_val;
            for i in 0..b {
                acc_terms[i] += term_vals[i];
            }
            acc_recon += recon_val;
            acc_w += w.iter().sum::<f64>() / nb as f64;
            acc_wd += wd.iter().sum::<f64>() / nb as f64;
            batches += 1;
        }

        if batches > 0 {
            let bf = batches as f64;
            let eval_mse = match eval_set {
                Some(es) => {
                    let eval_model = model.with_params(&ema);
                    reconstruction_mse(es, forward_frozen, &eval_model, &mut eval_rng)?
                }
                None => f64::NAN,
            };
            let mut row = vec![step as f64, acc_total / bf];
            row.extend(acc_terms.iter().map(|v| v / bf));
            row.extend([acc_recon / bf, acc_w / bf, acc_wd / bf, eval_mse]);
            log.push(row);
        }
    }

    Ok(TrainedReverse {
        model,
        ema,
        log,
        stats,
        steps: step,
        skipped_steps: total_skips,
    })
}

/// Projects a recovered hidden to input space: identity for state 0 (already
/// input space) and in input-space mode; head i - 1 otherwise.
fn project_to_input<F: Real>(
    t: &mut Tape<F>,
    recovered: Id,
    state_i: usize,
    bound: &super::BoundReverse,
    cfg: &super::ReverseConfig,
) -> Id {
    if state_i == 0 || cfg.hidden_mode == HiddenMode::InputSpace {
        recovered
    } else {
        linear_fwd(t, recovered, &bound.heads[state_i - 1])
    }
}

fn per_sample_scale<F: Real>(t: &mut Tape<F>, w: &[f64]) -> Id {
    let vals: Vec<F> = w.iter().map(|&v| F::from_f64(v)).collect();
    t.constant(DenseArray::new(vec![w.len(), 1, 1], vals).unwrap())
}

/// Mean squared error between clean eval samples and their w = 0
/// reconstruction through the frozen forward and the given reverse model.
pub fn reconstruction_mse<F: Real>(
    eval_set: &Dataset<F>,
    forward: &FlowModel<F>,
    reverse: &ReverseModel<F>,
    rng: &mut Rng,
) -> Result<f64> {
    let idx: Vec<usize> = (0..eval_set.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut counters = EvalCounters::default();
    for chunk in idx.chunks(512) {
        let (x, labels) = eval_set.gather(chunk);
        let traj = forward_trajectory(&x, &labels, forward, rng)?;
        let out = reverse_pass(traj.z(), &labels, 0.0, 0.0, reverse, &mut counters)?;
        for (a, b) in out.reconstruction.data().iter().zip(x.data().iter()) {
            let d = Real::to_f64(*a - *b);
            total += d * d;
        }
        count += x.numel();
    }
    Ok(total / count.max(1) as f64)
}
