//! Subcommand implementations behind the `biflow` binary. Everything routes
//! through [`run_subcommand`] so tests can drive the CLI in-process.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use biflow::data::{make_dataset, tiny_digits, Dataset};
use biflow::eval::{benchmark_sampling, mmd, normalization_integral, prior_moment_check, EvalReport};
use biflow::flow::{
    forward_trajectory, nll_loss, train_forward, FlowModel, TrainForwardConfig,
};
use biflow::inverse::{sample_exact, EvalCounters, GuidanceSpec, Mode, Schedule, Space};
use biflow::io::{load_checkpoint, parse_config, save_checkpoint, ExperimentConfig};
use biflow::numerics::{Real, Rng};
use biflow::reverse::{
    reverse_pass, train_reverse, GuidancePrior, LossConfig, ReverseModel, Strategy,
    TrainReverseConfig, TrajectoryNorm,
};

/// Training and sampling run at 32-bit.
type F = f32;

#[derive(Parser)]
#[command(
    name = "biflow",
    about = "Bidirectional normalizing flows: train, invert, sample, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the forward flow by maximum likelihood
    TrainForward {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric CSV destination (default: <out>.metrics.csv)
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the reverse model against a frozen forward checkpoint
    TrainReverse {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// 1-NFE sampling through the learned reverse model
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        /// Guidance scale conditioning (defaults to the config's sample_w)
        #[arg(long)]
        w: Option<f64>,
        /// Denoise-block guidance scale (defaults to sample_wd)
        #[arg(long)]
        wd: Option<f64>,
        /// Fixed class label; drawn uniformly when absent
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sampling through the exact sequential inverse
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// linear | const
        #[arg(long)]
        cfg_schedule: Option<String>,
        /// param | pixel
        #[arg(long)]
        cfg_space: Option<String>,
        /// online | offline
        #[arg(long)]
        cfg_mode: Option<String>,
        /// score | none
        #[arg(long)]
        denoise: Option<String>,
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluation report: NLL, MMD, prior moments, reconstruction, normalization
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Wall-clock and work-count comparison of the two samplers
    Benchmark {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Training-free editing
    Edit {
        #[command(subcommand)]
        op: EditOp,
    },
    /// The 2 schedules x 2 spaces x 2 modes guidance grid, one CSV row per cell
    AblateCfg {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Guidance scale applied in every cell
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum EditOp {
    /// Resample the prior outside the kept tokens
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated kept token indices, e.g. "0,3"
        #[arg(long)]
        mask_spec: String,
        /// Dataset row to edit
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-decode under a different class label
    Class {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Entry point shared by `main` and the tests: returns the process exit code.
pub fn run_subcommand(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainForward {
            config,
            out,
            metrics,
            seed,
        } => cmd_train_forward(config.as_deref(), &out, metrics.as_deref(), seed),
        Cmd::TrainReverse {
            config,
            forward,
            out,
            metrics,
            seed,
        } => cmd_train_reverse(config.as_deref(), &forward, &out, metrics.as_deref(), seed),
        Cmd::Sample {
            ckpt,
            n,
            w,
            wd,
            label,
            out,
            seed,
        } => cmd_sample(&ckpt, n, w, wd, label, out.as_deref(), seed),
        Cmd::Invert {
            ckpt,
            n,
            cfg_scale,
            cfg_schedule,
            cfg_space,
            cfg_mode,
            denoise,
            label,
            out,
            seed,
        } => cmd_invert(
            &ckpt,
            n,
            cfg_scale,
            cfg_schedule.as_deref(),
            cfg_space.as_deref(),
            cfg_mode.as_deref(),
            denoise.as_deref(),
            label,
            out.as_deref(),
            seed,
        ),
        Cmd::Eval { ckpt, out, seed } => cmd_eval(&ckpt, out.as_deref(), seed),
        Cmd::Benchmark {
            ckpt,
            n,
            batch,
            cfg_scale,
            out,
            seed,
        } => cmd_benchmark(&ckpt, n, batch, cfg_scale, out.as_deref(), seed),
        Cmd::Edit { op } => match op {
            EditOp::Inpaint {
                ckpt,
                mask_spec,
                index,
                out,
                seed,
            } => cmd_edit_inpaint(&ckpt, &mask_spec, index, out.as_deref(), seed),
            EditOp::Class {
                ckpt,
                from,
                to,
                index,
                out,
                seed,
            } => cmd_edit_class(&ckpt, from, to, index, out.as_deref(), seed),
        },
        Cmd::AblateCfg {
            ckpt,
            n,
            scale,
            out,
            seed,
        } => cmd_ablate_cfg(&ckpt, n, scale, out.as_deref(), seed),
    }
}

// ── shared plumbing ─────────────────────────────────────────────────

fn load_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_env_overrides()?;
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Deterministic derived streams; each purpose gets its own.
fn stream(seed: u64, tag: u64) -> Rng {
    Rng::new(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ tag)
}

fn build_dataset(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Dataset<F>> {
    Ok(if cfg.dataset == "tiny_digits" {
        tiny_digits(cfg.n_samples, rng, cfg.patch_size)?
    } else {
        make_dataset(&cfg.dataset, cfg.n_samples, rng)?
    })
}

fn build_eval_dataset(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Dataset<F>> {
    Ok(if cfg.dataset == "tiny_digits" {
        tiny_digits(cfg.eval_samples, rng, cfg.patch_size)?
    } else {
        make_dataset(&cfg.dataset, cfg.eval_samples, rng)?
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn samples_csv(samples: &biflow::DenseArray<F>, labels: &[usize]) -> String {
    let n = samples.shape()[0];
    let dims: usize = samples.shape().iter().skip(1).product();
    let mut s = String::from("label");
    for j in 0..dims {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for i in 0..n {
        s.push_str(&labels[i].to_string());
        for j in 0..dims {
            s.push_str(&format!(",{}", samples.data()[i * dims + j]));
        }
        s.push('\n');
    }
    s
}

fn guidance_from_flags(
    base: GuidanceSpec,
    scale: Option<f64>,
    schedule: Option<&str>,
    space: Option<&str>,
    mode: Option<&str>,
) -> Result<GuidanceSpec> {
    let mut g = base;
    if let Some(s) = scale {
        g.scale = s;
    }
    if let Some(s) = schedule {
        g.schedule = match s {
            "linear" => Schedule::Linear,
            "const" => Schedule::Constant,
            other => bail!("--cfg-schedule must be linear|const, got '{other}'"),
        };
    }
    if let Some(s) = space {
        g.space = match s {
            "param" => Space::Parameter,
            "pixel" => Space::Pixel,
            other => bail!("--cfg-space must be param|pixel, got '{other}'"),
        };
    }
    if let Some(s) = mode {
        g.mode = match s {
            "online" => Mode::Online,
            "offline" => Mode::Offline,
            other => bail!("--cfg-mode must be online|offline, got '{other}'"),
        };
    }
    Ok(g)
}

fn draw_labels(n: usize, fixed: Option<usize>, classes: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    match fixed {
        Some(l) if l >= classes => bail!("label {l} out of range ({classes} classes)"),
        Some(l) => Ok(vec![l; n]),
        None => Ok((0..n).map(|_| rng.below(classes)).collect()),
    }
}

// ── subcommands ─────────────────────────────────────────────────────

fn cmd_train_forward(
    config: Option<&Path>,
    out: &Path,
    metrics: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let mut data_rng = stream(cfg.seed, 0xDA7A);
    let dataset = build_dataset(&cfg, &mut data_rng)?;
    let mut init_rng = stream(cfg.seed, 0x1817);
    let model = FlowModel::<F>::init(cfg.flow_config()?, &mut init_rng)?;
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size.min(dataset.len()));
    let opt = TrainForwardConfig {
        lr: cfg.lr,
        betas: (cfg.adam_beta1, cfg.adam_beta2),
        epochs: cfg.epochs,
        batch: cfg.batch_size,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        ema_decay: cfg.ema_decay,
        label_drop: cfg.label_drop,
    };
    let mut train_rng = stream(cfg.seed, 0x7141);
    let trained = train_forward(&dataset, model, &opt, &mut train_rng)?;
    save_checkpoint(
        out,
        &cfg,
        &trained.model,
        &trained.ema,
        None,
        train_rng.state(),
        trained.steps,
    )?;
    let metrics_path = metrics
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| out.with_extension("metrics.csv"));
    std::fs::write(&metrics_path, trained.log.to_csv())?;
    eprintln!(
        "trained forward model: {} steps, checkpoint {}, metrics {}",
        trained.steps,
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn cmd_train_reverse(
    config: Option<&Path>,
    forward: &Path,
    out: &Path,
    metrics: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let fwd_ckpt = load_checkpoint::<F>(forward)?;
    if fwd_ckpt.config.flow_config()? != cfg.flow_config()? {
        bail!("forward checkpoint config does not match the requested config");
    }
    let fwd_eval = fwd_ckpt.forward_eval();
    let mut data_rng = stream(cfg.seed, 0xDA7A);
    let dataset = build_dataset(&cfg, &mut data_rng)?;
    let mut eval_rng = stream(cfg.seed, 0xE7A1);
    let eval_set = build_eval_dataset(&cfg, &mut eval_rng)?;
    let mut init_rng = stream(cfg.seed, 0x1818);
    let model = ReverseModel::<F>::init(cfg.reverse_config()?, &mut init_rng)?;
    let loss_cfg = LossConfig {
        strategy: Strategy::parse(&cfg.strategy)?,
        adaptive_p: cfg.adaptive_p,
        adaptive_offset: cfg.adaptive_offset,
        term_weights: None,
        trajectory_norm: TrajectoryNorm::parse(&cfg.trajectory_norm)?,
        metric: cfg.metric.clone(),
    };
    let prior = GuidancePrior {
        w_max: cfg.w_max,
        wd_max: cfg.wd_max,
    };
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size.min(dataset.len()));
    let opt = TrainReverseConfig {
        lr: cfg.lr,
        betas: (cfg.adam_beta1, cfg.adam_beta2),
        epochs: cfg.rev_epochs,
        batch: cfg.batch_size,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        ema_decay: cfg.ema_decay,
        label_drop: cfg.label_drop,
    };
    let mut train_rng = stream(cfg.seed, 0x7142);
    let trained = train_reverse(
        &dataset,
        &fwd_eval,
        model,
        &loss_cfg,
        &prior,
        &opt,
        Some(&eval_set),
        &mut train_rng,
    )?;
    save_checkpoint(
        out,
        &cfg,
        &fwd_ckpt.forward,
        &fwd_ckpt.forward_ema,
        Some((&trained.model, &trained.ema)),
        train_rng.state(),
        trained.steps,
    )?;
    let metrics_path = metrics
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| out.with_extension("metrics.csv"));
    std::fs::write(&metrics_path, trained.log.to_csv())?;
    eprintln!(
        "trained reverse model ({}): {} steps, checkpoint {}",
        cfg.strategy,
        trained.steps,
        out.display()
    );
    Ok(())
}

fn cmd_sample(
    ckpt: &Path,
    n: usize,
    w: Option<f64>,
    wd: Option<f64>,
    label: Option<usize>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let rev = c
        .reverse_eval()
        .ok_or_else(|| anyhow!("checkpoint has no reverse model; train-reverse first"))?;
    let mut rng = stream(cfg.seed, 0x5A3);
    let labels = draw_labels(n, label, rev.cfg.classes, &mut rng)?;
    let z = rng.gaussian::<F>(&[n, rev.cfg.tokens, rev.cfg.dim]);
    let w = w.unwrap_or(cfg.sample_w);
    let wd = wd.unwrap_or(cfg.sample_wd);
    let mut counters = EvalCounters::default();
    let samples = if n == 0 {
        biflow::DenseArray::zeros(&[0, rev.cfg.tokens, rev.cfg.dim])
    } else {
        reverse_pass(&z, &labels, w, wd, &rev, &mut counters)?.reconstruction
    };
    emit(out, &samples_csv(&samples, &labels))
}

#[allow(clippy::too_many_arguments)]
fn cmd_invert(
    ckpt: &Path,
    n: usize,
    cfg_scale: Option<f64>,
    cfg_schedule: Option<&str>,
    cfg_space: Option<&str>,
    cfg_mode: Option<&str>,
    denoise: Option<&str>,
    label: Option<usize>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fwd = c.forward_eval();
    let guidance = guidance_from_flags(
        cfg.guidance_spec(),
        cfg_scale,
        cfg_schedule,
        cfg_space,
        cfg_mode,
    )?;
    let denoise_on = match denoise.unwrap_or(cfg.denoise.as_str()) {
        "score" => true,
        "none" => false,
        other => bail!("--denoise must be score|none, got '{other}'"),
    };
    let mut rng = stream(cfg.seed, 0x5A3);
    let labels = draw_labels(n, label, fwd.cfg.classes, &mut rng)?;
    let mut counters = EvalCounters::default();
    let samples = if n == 0 {
        biflow::DenseArray::zeros(&[0, fwd.cfg.tokens, fwd.cfg.dim])
    } else {
        sample_exact(n, &labels, &fwd, &guidance, denoise_on, &mut rng, &mut counters)?
    };
    emit(out, &samples_csv(&samples, &labels))
}

fn cmd_eval(ckpt: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fwd = c.forward_eval();
    let rev = c.reverse_eval();
    let mut eval_rng = stream(cfg.seed, 0xE7A2);
    let eval_set = build_eval_dataset(&cfg, &mut eval_rng)?;

    // NLL and prior moments on the noisy inputs the flow models
    let (x, labels) = eval_set.gather(&(0..eval_set.len()).collect::<Vec<_>>());
    let traj = forward_trajectory(&x, &labels, &fwd, &mut eval_rng)?;
    let nll = Real::to_f64(nll_loss(&traj));
    let noised = Dataset {
        samples: traj.x_tilde().clone(),
        labels: labels.clone(),
        classes: eval_set.classes,
        name: eval_set.name.clone(),
        bbox: eval_set.bbox.clone(),
    };
    let (mean_err, cov_err) = prior_moment_check(&fwd, &noised)?;

    // generative samples: the reverse model when present, exact inverse otherwise
    let n_gen = eval_set.len();
    let gen_labels = draw_labels(n_gen, None, fwd.cfg.classes, &mut eval_rng)?;
    let mut counters = EvalCounters::default();
    let gen = match &rev {
        Some(r) => {
            let z = eval_rng.gaussian::<F>(&[n_gen, fwd.cfg.tokens, fwd.cfg.dim]);
            reverse_pass(&z, &gen_labels, cfg.sample_w, cfg.sample_wd, r, &mut counters)?
                .reconstruction
        }
        None => sample_exact(
            n_gen,
            &gen_labels,
            &fwd,
            &cfg.guidance_spec(),
            cfg.denoise == "score",
            &mut eval_rng,
            &mut counters,
        )?,
    };
    let mmd2 = mmd(&gen, &eval_set.samples, None)?;

    let recon_mse = match &rev {
        Some(r) => biflow::reverse::train::reconstruction_mse(&eval_set, &fwd, r, &mut eval_rng)?,
        None => f64::NAN,
    };
    let norm_integral = if fwd.cfg.tokens * fwd.cfg.dim == 2 {
        Some(normalization_integral(&fwd, (-6.0, 6.0), 200)?)
    } else {
        None
    };
    let report = EvalReport {
        nll,
        mmd: mmd2,
        mean_err,
        cov_err,
        recon_mse,
        norm_integral,
    };
    emit(
        out,
        &format!("{}\n{}\n", EvalReport::csv_header(), report.to_csv_row()),
    )
}

fn cmd_benchmark(
    ckpt: &Path,
    n: usize,
    batch: usize,
    cfg_scale: Option<f64>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fwd = c.forward_eval();
    let rev = c
        .reverse_eval()
        .ok_or_else(|| anyhow!("benchmark needs a reverse model in the checkpoint"))?;
    let mut g = cfg.guidance_spec();
    if let Some(s) = cfg_scale {
        g.scale = s;
    }
    let mut rng = stream(cfg.seed, 0xBE7C);
    let report = benchmark_sampling(&fwd, &rev, n, batch, &g, &mut rng)?;
    emit(out, &report.to_csv())
}

fn cmd_edit_inpaint(
    ckpt: &Path,
    mask_spec: &str,
    index: usize,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fwd = c.forward_eval();
    let rev = c
        .reverse_eval()
        .ok_or_else(|| anyhow!("editing needs a reverse model in the checkpoint"))?;
    let mut data_rng = stream(cfg.seed, 0xDA7A);
    let dataset = build_dataset(&cfg, &mut data_rng)?;
    if index >= dataset.len() {
        bail!("--index {index} out of range ({} rows)", dataset.len());
    }
    let (x, labels) = dataset.gather(&[index]);
    let mask = biflow::edit::Mask::from_kept_indices(mask_spec, fwd.cfg.tokens)?;
    let mut rng = stream(cfg.seed, 0xED17);
    let edited = biflow::edit::inpaint(
        &x,
        &mask,
        &labels,
        &fwd,
        &rev,
        cfg.sample_w,
        cfg.sample_wd,
        &mut rng,
    )?;
    emit(out, &before_after_csv(&x, &edited))
}

fn cmd_edit_class(
    ckpt: &Path,
    from: usize,
    to: usize,
    index: usize,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fwd = c.forward_eval();
    let rev = c
        .reverse_eval()
        .ok_or_else(|| anyhow!("editing needs a reverse model in the checkpoint"))?;
    let mut data_rng = stream(cfg.seed, 0xDA7A);
    let dataset = build_dataset(&cfg, &mut data_rng)?;
    // pick the index-th sample of the source class
    let row = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == from)
        .map(|(i, _)| i)
        .nth(index)
        .ok_or_else(|| anyhow!("no sample #{index} with label {from}"))?;
    let (x, _) = dataset.gather(&[row]);
    let edited = biflow::edit::class_edit(&x, from, to, &fwd, &rev, cfg.sample_w, cfg.sample_wd)?;
    emit(out, &before_after_csv(&x, &edited))
}

fn before_after_csv(before: &biflow::DenseArray<F>, after: &biflow::DenseArray<F>) -> String {
    let dims: usize = before.shape().iter().skip(1).product();
    let mut s = String::from("role");
    for j in 0..dims {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for (role, arr) in [("before", before), ("after", after)] {
        s.push_str(role);
        for j in 0..dims {
            s.push_str(&format!(",{}", arr.data()[j]));
        }
        s.push('\n');
    }
    s
}

fn cmd_ablate_cfg(
    ckpt: &Path,
    n: usize,
    scale: f64,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let c = load_checkpoint::<F>(ckpt)?;
    let mut cfg = c.config.clone();
    cfg.apply_env_overrides()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fwd = c.forward_eval();
    let mut eval_rng = stream(cfg.seed, 0xAB1A);
    let eval_set = build_eval_dataset(&cfg, &mut eval_rng)?;
    let mut csv = String::from("schedule,space,mode,scale,mmd2\n");
    for schedule in [Schedule::Linear, Schedule::Constant] {
        for space in [Space::Parameter, Space::Pixel] {
            for mode in [Mode::Online, Mode::Offline] {
                let g = GuidanceSpec {
                    scale,
                    schedule,
                    space,
                    mode,
                    denoise_scale: cfg.sample_wd,
                };
                let mut rng = stream(cfg.seed, 0xCE11);
                let labels = draw_labels(n, None, fwd.cfg.classes, &mut rng)?;
                let mut counters = EvalCounters::default();
                let samples = sample_exact(
                    n,
                    &labels,
                    &fwd,
                    &g,
                    cfg.denoise == "score",
                    &mut rng,
                    &mut counters,
                )?;
                let m = mmd(&samples, &eval_set.samples, None)?;
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    match schedule {
                        Schedule::Linear => "linear",
                        Schedule::Constant => "const",
                    },
                    match space {
                        Space::Parameter => "param",
                        Space::Pixel => "pixel",
                    },
                    match mode {
                        Mode::Online => "online",
                        Mode::Offline => "offline",
                    },
                    scale,
                    m
                ));
            }
        }
    }
    emit(out, &csv)
}
