//! Evaluation metrics: prior-moment checks, density normalization by
//! quadrature, kernel MMD as the sample-quality statistic, and the
//! sequential-vs-1-NFE sampling benchmark.

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{forward_trajectory_noiseless, log_prob, FlowModel};
use crate::inverse::{sample_exact, EvalCounters, GuidanceSpec};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::rng::Rng;
use crate::reverse::{reverse_pass, ReverseModel};

/// One evaluation summary; serialized as a CSV row.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub nll: f64,
    pub mmd: f64,
    pub mean_err: f64,
    pub cov_err: f64,
    pub recon_mse: f64,
    pub norm_integral: Option<f64>,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "nll,mmd,mean_err,cov_err,recon_mse,norm_integral"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.nll,
            self.mmd,
            self.mean_err,
            self.cov_err,
            self.recon_mse,
            self.norm_integral.map_or("".to_string(), |v| v.to_string())
        )
    }

    pub fn all_finite(&self) -> bool {
        self.nll.is_finite()
            && self.mmd.is_finite()
            && self.mean_err.is_finite()
            && self.cov_err.is_finite()
            && self.recon_mse.is_finite()
            && self.norm_integral.map_or(true, |v| v.is_finite())
    }
}

/// Pushes the dataset through the flow and reports `|mean(z)|` (L2 of the
/// mean vector) and `||cov(z) - I||_F`. The samples go in as given; noise the
/// data beforehand if the model's noisy input distribution is the target.
pub fn prior_moment_check<F: Real>(
    model: &FlowModel<F>,
    dataset: &Dataset<F>,
) -> Result<(f64, f64)> {
    let dims = dataset.tokens() * dataset.dim();
    let n = dataset.len();
    let mut zs: Vec<f64> = Vec::with_capacity(n * dims);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(1024) {
        let (x, labels) = dataset.gather(chunk);
        let traj = forward_trajectory_noiseless(&x, &labels, model)?;
        zs.extend(traj.z().data().iter().map(|&v| Real::to_f64(v)));
    }
    let mut mean = vec![0.0f64; dims];
    for row in zs.chunks_exact(dims) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; dims * dims];
    for row in zs.chunks_exact(dims) {
        for i in 0..dims {
            let di = row[i] - mean[i];
            for j in 0..dims {
                cov[i * dims + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let mut cov_err = 0.0;
    for i in 0..dims {
        for j in 0..dims {
            let c = cov[i * dims + j] / n as f64 - if i == j { 1.0 } else { 0.0 };
            cov_err += c * c;
        }
    }
    let mean_err = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    Ok((mean_err, cov_err.sqrt()))
}

/// Trapezoidal integral of the model density over a square 2-D grid. The
/// density is the uniform class mixture `mean_c p(x | c)`, which the
/// change-of-variables construction normalizes exactly; deviations from 1
/// measure quadrature error plus mass outside the bounds.
pub fn normalization_integral<F: Real>(
    model: &FlowModel<F>,
    bounds: (f64, f64),
    resolution: usize,
) -> Result<f64> {
    let cfg = &model.cfg;
    if cfg.tokens * cfg.dim != 2 {
        return Err(Error::invalid(
            "normalization integral is defined for 2-D layouts only",
        ));
    }
    if resolution < 2 {
        return Err(Error::invalid("grid resolution must be >= 2"));
    }
    let (lo, hi) = bounds;
    if hi <= lo {
        return Err(Error::invalid("bounds must satisfy hi > lo"));
    }
    let h = (hi - lo) / (resolution - 1) as f64;
    let classes = cfg.classes;
    let mut integral = 0.0;

    let rows_per_chunk = (8192 / resolution).max(1);
    let mut gy = 0usize;
    while gy < resolution {
        let rows = rows_per_chunk.min(resolution - gy);
        let npts = rows * resolution;
        let mut pts = Vec::with_capacity(npts * 2);
        for r in 0..rows {
            let y = lo + (gy + r) as f64 * h;
            for c in 0..resolution {
                let x = lo + c as f64 * h;
                pts.push(F::from_f64(x));
                pts.push(F::from_f64(y));
            }
        }
        let batch = DenseArray::new(vec![npts, cfg.tokens, cfg.dim], pts)?;
        // mixture over classes
        let mut dens = vec![0.0f64; npts];
        for cls in 0..classes {
            let labels = vec![cls; npts];
            let lp = log_prob(&batch, &labels, model)?;
            for (d, &l) in dens.iter_mut().zip(lp.data().iter()) {
                *d += Real::to_f64(l).exp() / classes as f64;
            }
        }
        for (k, &d) in dens.iter().enumerate() {
            let r = gy + k / resolution;
            let c = k % resolution;
            let wy = if r == 0 || r == resolution - 1 { 0.5 } else { 1.0 };
            let wx = if c == 0 || c == resolution - 1 { 0.5 } else { 1.0 };
            integral += wx * wy * d;
        }
        gy += rows;
    }
    Ok(integral * h * h)
}

/// Unbiased Gaussian-kernel MMD^2 between two sample sets (rows flattened),
/// floored at 0 for reporting. `bandwidth` of `None` uses the median
/// pairwise distance of the pooled sample.
pub fn mmd<F: Real>(
    a: &DenseArray<F>,
    b: &DenseArray<F>,
    bandwidth: Option<f64>,
) -> Result<f64> {
    let m = a.shape()[0];
    let n = b.shape()[0];
    if m == 0 || n == 0 {
        return Err(Error::invalid("mmd needs non-empty sample sets"));
    }
    let da: usize = a.shape().iter().skip(1).product();
    let db: usize = b.shape().iter().skip(1).product();
    if da != db {
        return Err(Error::shape("mmd sample dims differ".to_string()));
    }
    let rows_a: Vec<Vec<f64>> = a
        .data()
        .chunks_exact(da)
        .map(|r| r.iter().map(|&v| Real::to_f64(v)).collect())
        .collect();
    let rows_b: Vec<Vec<f64>> = b
        .data()
        .chunks_exact(db)
        .map(|r| r.iter().map(|&v| Real::to_f64(v)).collect())
        .collect();
    let dist2 = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    let gamma = match bandwidth {
        Some(g) => g,
        None => {
            let pooled: Vec<&Vec<f64>> = rows_a.iter().chain(rows_b.iter()).collect();
            let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
            for i in 0..pooled.len() {
                for j in i + 1..pooled.len() {
                    d.push(dist2(pooled[i], pooled[j]).sqrt());
                }
            }
            if d.is_empty() {
                1.0
            } else {
                let mid = d.len() / 2;
                d.select_nth_unstable_by(mid, |x, y| x.partial_cmp(y).unwrap());
                d[mid].max(1e-12)
            }
        }
    };
    let k = |x: &[f64], y: &[f64]| (-dist2(x, y) / (2.0 * gamma * gamma)).exp();
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += k(&rows_a[i], &rows_a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += k(&rows_b[i], &rows_b[j]);
            }
        }
    }
    let mut kab = 0.0;
    for ra in &rows_a {
        for rb in &rows_b {
            kab += k(ra, rb);
        }
    }
    let est = if m > 1 { kaa / (m * (m - 1)) as f64 } else { 0.0 }
        + if n > 1 { kbb / (n * (n - 1)) as f64 } else { 0.0 }
        - 2.0 * kab / (m * n) as f64;
    Ok(est.max(0.0))
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub sampler: String,
    pub nfe_blocks: f64,
    pub ms_per_sample: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
    pub seq_counters: EvalCounters,
    pub rev_counters: EvalCounters,
}

impl BenchmarkReport {
    pub fn csv_header() -> &'static str {
        "sampler,nfe_blocks,ms_per_sample,speedup"
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::csv_header());
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.sampler, r.nfe_blocks, r.ms_per_sample, r.speedup
            ));
        }
        s
    }

    pub fn speedup(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.speedup)
    }
}

/// Times (a) sequential inversion + score denoising + inference-time CFG
/// against (b) the 1-NFE reverse pass with training-time CFG, on the same
/// host and labels. Returns per-sample wall clock plus exact work counters.
pub fn benchmark_sampling<F: Real>(
    model_fwd: &FlowModel<F>,
    model_rev: &ReverseModel<F>,
    n: usize,
    batch: usize,
    guidance: &GuidanceSpec,
    rng: &mut Rng,
) -> Result<BenchmarkReport> {
    let mut report = BenchmarkReport::default();
    if n == 0 {
        return Ok(report);
    }
    let classes = model_fwd.cfg.classes;
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();

    let mut seq_counters = EvalCounters::default();
    let mut seq_rng = rng.split();
    let t0 = Instant::now();
    let _xa = sample_exact(
        n,
        &labels,
        model_fwd,
        guidance,
        true,
        &mut seq_rng,
        &mut seq_counters,
    )?;
    let seq_ms = t0.elapsed().as_secs_f64() * 1e3 / n as f64;

    let mut rev_counters = EvalCounters::default();
    let mut rev_rng = rng.split();
    let cfgr = &model_rev.cfg;
    let t1 = Instant::now();
    let mut done = 0usize;
    while done < n {
        let take = batch.max(1).min(n - done);
        let z = rev_rng.gaussian::<F>(&[take, cfgr.tokens, cfgr.dim]);
        let _ = reverse_pass(
            &z,
            &labels[done..done + take],
            guidance.scale,
            guidance.denoise_scale,
            model_rev,
            &mut rev_counters,
        )?;
        done += take;
    }
    let rev_ms = t1.elapsed().as_secs_f64() * 1e3 / n as f64;

    let seq_blocks = seq_counters.conditioner_steps as f64 / n as f64;
    let rev_blocks = rev_counters.reverse_block_calls as f64 / n as f64;
    report.rows.push(BenchRow {
        sampler: "sequential_inverse".into(),
        nfe_blocks: seq_blocks,
        ms_per_sample: seq_ms,
        speedup: 1.0,
    });
    report.rows.push(BenchRow {
        sampler: "reverse_1nfe".into(),
        nfe_blocks: rev_blocks,
        ms_per_sample: rev_ms,
        speedup: seq_ms / rev_ms,
    });
    report.seq_counters = seq_counters;
    report.rev_counters = rev_counters;
    Ok(report)
}
