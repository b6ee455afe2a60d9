//! Maximum-likelihood training loop for the forward model.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::adam::{adam_step, ema_update, AdamState};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Tape;

use super::{flow_states, nll_taped, FlowModel};

const MAX_CONSECUTIVE_SKIPS: u32 = 50;

#[derive(Clone, Debug)]
pub struct TrainForwardConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub batch: usize,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub label_drop: f64,
}

impl Default for TrainForwardConfig {
    fn default() -> Self {
        TrainForwardConfig {
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

/// Column-labelled numeric log, serialized as CSV.
#[derive(Clone, Debug, Default)]
pub struct MetricLog {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricLog {
    pub fn new(header: Vec<String>) -> Self {
        MetricLog {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// A trained forward model with its EMA parameter shadow and metric log.
#[derive(Clone, Debug)]
pub struct TrainedForward<F: Real> {
    pub model: FlowModel<F>,
    pub ema: Vec<DenseArray<F>>,
    pub log: MetricLog,
    pub skipped_steps: u64,
    pub steps: u64,
}

impl<F: Real> TrainedForward<F> {
    /// Evaluation-grade copy holding the EMA weights.
    pub fn ema_model(&self) -> FlowModel<F> {
        self.model.with_params(&self.ema)
    }
}

/// Trains `model` in place by exact MLE with Adam, linear warmup into a
/// constant rate, per-sample label drop to the null token, and an EMA shadow.
/// The metric log gains one row per epoch:
/// `step,epoch,nll,logdet_mean,block_norm_0..B`.
pub fn train_forward<F: Real>(
    dataset: &Dataset<F>,
    mut model: FlowModel<F>,
    opt: &TrainForwardConfig,
    rng: &mut Rng,
) -> Result<TrainedForward<F>> {
    if dataset.len() == 0 {
        return Err(Error::invalid("dataset is empty"));
    }
    let cfg = model.cfg.clone();
    let n = dataset.len();
    let batch = opt.batch.min(n).max(1);

    let mut header = vec![
        "step".to_string(),
        "epoch".to_string(),
        "nll".to_string(),
        "logdet_mean".to_string(),
    ];
    for i in 0..=cfg.blocks {
        header.push(format!("block_norm_{i}"));
    }
    let mut log = MetricLog::new(header);

    let mut ema = model.param_values();
    let mut adam = AdamState::for_params(&model.params());
    let mut step: u64 = 0;
    let mut consecutive_skips: u32 = 0;
    let mut total_skips: u64 = 0;
    let sigma = F::from_f64(cfg.sigma);
    let dims = cfg.tokens * cfg.dim;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opt.epochs {
        rng.shuffle(&mut order);
        let mut epoch_nll = 0.0;
        let mut epoch_logdet = 0.0;
        let mut epoch_norms = vec![0.0f64; cfg.blocks + 1];
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(batch) {
            step += 1;
            let (x, mut labels) = dataset.gather(chunk);
            for l in labels.iter_mut() {
                if rng.coin(opt.label_drop) {
                    *l = cfg.null_class();
                }
            }
            let eps = rng.gaussian::<F>(x.shape());
            let x_tilde = crate::numerics::array::zip_broadcast(&x, &eps, |a, e| a + sigma * e)?;

            let mut tape = Tape::new();
            let (bound, param_ids) = model.bind_trainable(&mut tape);
            let xi = tape.leaf(x_tilde, false);
            let skip = |skips: &mut u32, total: &mut u64| -> Result<()> {
                *skips += 1;
                *total += 1;
                if *skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::TrainingAborted(format!(
                        "{skips} consecutive non-finite steps"
                    )));
                }
                Ok(())
            };
            let (states, logdet) = match flow_states(&mut tape, xi, &labels, &bound, &cfg) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    skip(&mut consecutive_skips, &mut total_skips)?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let z = *states.last().unwrap();
            let loss = nll_taped(&mut tape, z, logdet, dims);
            let loss_val = Real::to_f64(tape.value(loss).item());

            if !loss_val.is_finite() {
                skip(&mut consecutive_skips, &mut total_skips)?;
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

            epoch_nll += loss_val;
            epoch_logdet += mean_f64(tape.value(logdet).data());
            for (i, &s) in states.iter().enumerate() {
                epoch_norms[i] += mean_l2_norm(tape.value(s));
            }
            epoch_batches += 1;
        }

        if epoch_batches > 0 {
            let b = epoch_batches as f64;
            let mut row = vec![
                step as f64,
                epoch as f64,
                epoch_nll / b,
                epoch_logdet / b,
            ];
            row.extend(epoch_norms.iter().map(|v| v / b));
            log.push(row);
        }
    }

    adam.skipped = total_skips;
    Ok(TrainedForward {
        model,
        ema,
        log,
        skipped_steps: total_skips,
        steps: step,
    })
}

fn mean_f64<F: Real>(xs: &[F]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&v| Real::to_f64(v)).sum::<f64>() / xs.len() as f64
}

/// Mean over the batch of per-sample L2 norms.
fn mean_l2_norm<F: Real>(x: &DenseArray<F>) -> f64 {
    let n = x.shape()[0].max(1);
    let chunk: usize = x.shape().iter().skip(1).product::<usize>().max(1);
    let mut total = 0.0;
    for row in x.data().chunks_exact(chunk) {
        total += row
            .iter()
            .map(|&v| Real::to_f64(v).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons;
    use crate::flow::{nll_loss, forward_trajectory, FlowConfig};

    fn moon_cfg() -> FlowConfig {
        FlowConfig {
            blocks: 4,
            tokens: 2,
            dim: 1,
            layers: 1,
            width: 32,
            heads: 2,
            class_tokens: 1,
            classes: 2,
            clip: 1.0,
            sigma: 0.3,
        }
    }

    #[test]
    fn zero_lr_leaves_params_fixed() {
        let mut rng = Rng::new(21);
        let data = two_moons::<f32>(64, &mut rng);
        let model = FlowModel::init(moon_cfg(), &mut rng).unwrap();
        let before = model.param_values();
        let opt = TrainForwardConfig {
            lr: 0.0,
            epochs: 2,
            batch: 32,
            warmup_steps: 0,
            ..Default::default()
        };
        let trained = train_forward(&data, model, &opt, &mut rng).unwrap();
        for (a, b) in before.iter().zip(trained.model.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn ema_decay_zero_tracks_raw_params() {
        let mut rng = Rng::new(22);
        let data = two_moons::<f32>(64, &mut rng);
        let model = FlowModel::init(moon_cfg(), &mut rng).unwrap();
        let opt = TrainForwardConfig {
            lr: 1e-3,
            epochs: 1,
            batch: 32,
            warmup_steps: 0,
            ema_decay: 0.0,
            ..Default::default()
        };
        let trained = train_forward(&data, model, &opt, &mut rng).unwrap();
        for (e, p) in trained.ema.iter().zip(trained.model.params()) {
            assert_eq!(e.data(), p.data());
        }
    }

    #[test]
    fn scalar_gaussian_fit_reaches_closed_form_optimum() {
        // One block on T=1, d=1 learns constant (mu, alpha); on N(m, s^2) data
        // the NLL optimum is 0.5*ln(2*pi*e) + ln(s).
        let (m, s) = (0.5, 1.5);
        let mut rng = Rng::new(23);
        let n = 2048;
        let raw = rng.gaussian::<f64>(&[n, 1, 1]);
        let samples = raw.map(|v| m + s * v);
        let data = crate::data::Dataset {
            samples,
            labels: vec![0; n],
            classes: 1,
            name: "gauss1d".into(),
            bbox: vec![(-10.0, 10.0)],
        };
        let cfg = FlowConfig {
            blocks: 1,
            tokens: 1,
            dim: 1,
            layers: 1,
            width: 8,
            heads: 1,
            class_tokens: 1,
            classes: 1,
            clip: 3.0,
            sigma: 0.0,
        };
        let model = FlowModel::init(cfg, &mut rng).unwrap();
        let opt = TrainForwardConfig {
            lr: 2e-2,
            epochs: 60,
            batch: 512,
            warmup_steps: 20,
            ema_decay: 0.99,
            label_drop: 0.0,
            ..Default::default()
        };
        let trained = train_forward(&data, model, &opt, &mut rng).unwrap();
        let traj = forward_trajectory(&data.samples, &data.labels, &trained.ema_model(), &mut rng).unwrap();
        let nll = Real::to_f64(nll_loss(&traj));
        // Optimum against the empirical moments of this finite sample.
        let mean = data.samples.data().iter().sum::<f64>() / n as f64;
        let var = data
            .samples
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let opt_nll = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
        assert!(
            (nll - opt_nll).abs() < 1e-2,
            "nll {nll} vs analytic optimum {opt_nll}"
        );
    }

    #[test]
    fn abort_after_consecutive_non_finite_losses() {
        let mut rng = Rng::new(24);
        let mut data = two_moons::<f32>(64, &mut rng);
        data.samples.data_mut()[0] = f32::NAN;
        let model = FlowModel::init(moon_cfg(), &mut rng).unwrap();
        let opt = TrainForwardConfig {
            epochs: 200,
            batch: 64,
            ..Default::default()
        };
        let err = train_forward(&data, model, &opt, &mut rng);
        assert!(matches!(err, Err(Error::TrainingAborted(_))));
    }
}
