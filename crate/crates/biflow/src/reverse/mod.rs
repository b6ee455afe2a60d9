//! The learned reverse model: B feedforward blocks approximating the flow
//! inverse plus one learned denoising block, all with bidirectional attention
//! and in-context class/guidance-scale conditioning.
//!
//! One pass maps `z -> h^{B-1} -> ... -> h^0 -> x'` with no sequential
//! per-token decoding. Hidden states live either in a wide trunk space with
//! linear projection heads back to input space (hidden alignment) or directly
//! in input space (hidden distillation); the block producing `h^0` always
//! lands in input space.

mod fast;
pub mod guidance;
pub mod losses;
pub mod train;

pub use guidance::{guided_block, unguided_recovery};
pub use losses::{
    adaptive_weight, hidden_align_loss, hidden_distill_loss, metric_by_name, naive_loss,
    trajectory_normalize, Distance, Mse, Sse, TrajectoryStats,
};
pub use train::{
    train_reverse, GuidancePrior, LossConfig, Strategy, TrainReverseConfig, TrainedReverse,
    TrajectoryNorm,
};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::inverse::EvalCounters;
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::nn::{
    encoder_layer_fwd, impl_params, init_embedding, init_layer, init_linear, linear_fwd,
    zero_linear, EncoderLayer, Linear, Params,
};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Id, Tape};

/// Where intermediate reverse states live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenMode {
    /// Wide trunk states, projected to input space by learned heads.
    Hidden,
    /// Every block output is already in input space.
    InputSpace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReverseConfig {
    /// Forward block count B; the reverse model owns B inverse blocks.
    pub forward_blocks: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Transformer layers per reverse block.
    pub layers: usize,
    /// Trunk width.
    pub width: usize,
    pub heads: usize,
    pub class_tokens: usize,
    pub classes: usize,
    pub hidden_mode: HiddenMode,
    /// Whether the extra learned denoising block exists.
    pub denoise: bool,
}

impl ReverseConfig {
    /// Mirrors the forward layout; trunk hyperparameters are free.
    pub fn from_forward(
        fwd: &FlowConfig,
        layers: usize,
        width: usize,
        heads: usize,
        hidden_mode: HiddenMode,
        denoise: bool,
    ) -> Self {
        ReverseConfig {
            forward_blocks: fwd.blocks,
            tokens: fwd.tokens,
            dim: fwd.dim,
            layers,
            width,
            heads,
            class_tokens: fwd.class_tokens,
            classes: fwd.classes,
            hidden_mode,
            denoise,
        }
    }

    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.width
    }

    /// Guidance tokens: one for w, one for w_d.
    pub const GUIDANCE_TOKENS: usize = 2;

    /// Hidden-state width of inverse block `j`'s output (j indexes application
    /// order: block 0 consumes z, block B-1 emits h^0).
    pub(crate) fn block_out_dim(&self, j: usize) -> usize {
        match self.hidden_mode {
            HiddenMode::InputSpace => self.dim,
            HiddenMode::Hidden => {
                if j + 1 == self.forward_blocks {
                    self.dim
                } else {
                    self.width
                }
            }
        }
    }

    fn block_in_dim(&self, j: usize) -> usize {
        if j == 0 {
            self.dim
        } else {
            self.block_out_dim(j - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.forward_blocks == 0 {
            return Err(Error::invalid("reverse model needs >= 1 inverse block"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid("reverse width must divide by heads"));
        }
        if self.class_tokens == 0 {
            return Err(Error::invalid("at least one class token required"));
        }
        Ok(())
    }
}

/// One feedforward reverse block: project in, bidirectional transformer over
/// [class tokens, w token, w_d token, data tokens], project out, add a skip.
#[derive(Clone, Debug)]
pub struct ReverseBlock<P> {
    pub inp: Linear<P>,
    pub pos: P,
    pub layers: Vec<EncoderLayer<P>>,
    pub out: Linear<P>,
    pub skip: Linear<P>,
}

impl_params!(ReverseBlock { inp, pos, layers, out, skip });

impl<F: Real> ReverseBlock<DenseArray<F>> {
    fn init(cfg: &ReverseConfig, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = cfg.width;
        let seq = cfg.class_tokens + ReverseConfig::GUIDANCE_TOKENS + cfg.tokens;
        // identity skip when square, random projection otherwise
        let skip = if in_dim == out_dim {
            let mut eye = DenseArray::zeros(&[in_dim, out_dim]);
            for i in 0..in_dim {
                eye.data_mut()[i * out_dim + i] = F::one();
            }
            Linear {
                w: eye,
                b: DenseArray::zeros(&[out_dim]),
            }
        } else {
            init_linear(rng, in_dim, out_dim)
        };
        ReverseBlock {
            inp: init_linear(rng, in_dim, w),
            pos: init_embedding(rng, &[seq, w]),
            layers: (0..cfg.layers)
                .map(|_| init_layer(rng, w, cfg.mlp_hidden()))
                .collect(),
            out: zero_linear(w, out_dim),
            skip,
        }
    }
}

/// The reverse model G: inverse blocks, optional denoise block, projection
/// heads, class table, and the scalar-to-token guidance embeddings.
#[derive(Clone, Debug)]
pub struct ReverseModel<F: Real> {
    pub cfg: ReverseConfig,
    pub cls: DenseArray<F>,
    pub w_embed: Linear<DenseArray<F>>,
    pub wd_embed: Linear<DenseArray<F>>,
    /// Application order: blocks[0] consumes z, blocks[B-1] emits h^0.
    pub blocks: Vec<ReverseBlock<DenseArray<F>>>,
    pub denoise: Option<ReverseBlock<DenseArray<F>>>,
    /// `heads[i - 1]` projects the hidden approximating state i, for
    /// i in 1..B (state 0 uses the identity). Empty in input-space mode.
    pub heads: Vec<Linear<DenseArray<F>>>,
}

pub struct BoundReverse {
    pub cls: Id,
    pub w_embed: Linear<Id>,
    pub wd_embed: Linear<Id>,
    pub blocks: Vec<ReverseBlock<Id>>,
    pub denoise: Option<ReverseBlock<Id>>,
    pub heads: Vec<Linear<Id>>,
}

impl<F: Real> ReverseModel<F> {
    pub fn init(cfg: ReverseConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.forward_blocks;
        let cls = init_embedding(rng, &[cfg.classes + 1, cfg.class_tokens, cfg.width]);
        let blocks = (0..b)
            .map(|j| ReverseBlock::init(&cfg, cfg.block_in_dim(j), cfg.block_out_dim(j), rng))
            .collect();
        let denoise = cfg
            .denoise
            .then(|| ReverseBlock::init(&cfg, cfg.dim, cfg.dim, rng));
        let heads = match cfg.hidden_mode {
            HiddenMode::InputSpace => Vec::new(),
            HiddenMode::Hidden => (1..b).map(|_| zero_linear(cfg.width, cfg.dim)).collect(),
        };
        let w_embed = init_linear(rng, 1, cfg.width);
        let wd_embed = init_linear(rng, 1, cfg.width);
        Ok(ReverseModel {
            cfg,
            cls,
            w_embed,
            wd_embed,
            blocks,
            denoise,
            heads,
        })
    }

    pub fn bind(&self, t: &mut Tape<F>, rg: bool) -> BoundReverse {
        BoundReverse {
            cls: self.cls.bind(t, rg),
            w_embed: self.w_embed.bind(t, rg),
            wd_embed: self.wd_embed.bind(t, rg),
            blocks: self.blocks.iter().map(|b| b.bind(t, rg)).collect(),
            denoise: self.denoise.as_ref().map(|d| d.bind(t, rg)),
            heads: self.heads.iter().map(|h| h.bind(t, rg)).collect(),
        }
    }

    /// Binds every parameter as a gradient leaf, returning ids in visit order.
    pub fn bind_trainable(&self, t: &mut Tape<F>) -> (BoundReverse, Vec<Id>) {
        let start = t.len();
        let bound = self.bind(t, true);
        let ids = (start..t.len()).map(Id::from_index).collect();
        (bound, ids)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a DenseArray<F>)) {
        self.cls.visit("cls", f);
        self.w_embed.visit("w_embed", f);
        self.wd_embed.visit("wd_embed", f);
        self.blocks.visit("blocks", f);
        if let Some(d) = &self.denoise {
            d.visit("denoise", f);
        }
        self.heads.visit("heads", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut DenseArray<F>)) {
        self.cls.visit_mut("cls", f);
        self.w_embed.visit_mut("w_embed", f);
        self.wd_embed.visit_mut("wd_embed", f);
        self.blocks.visit_mut("blocks", f);
        if let Some(d) = &mut self.denoise {
            d.visit_mut("denoise", f);
        }
        self.heads.visit_mut("heads", f);
    }

    pub fn params(&self) -> Vec<&DenseArray<F>> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn param_values(&self) -> Vec<DenseArray<F>> {
        self.params().into_iter().cloned().collect()
    }

    pub fn set_params(&mut self, vals: &[DenseArray<F>]) {
        let mut i = 0;
        self.visit_mut(&mut |_, p| {
            *p = vals[i].clone();
            i += 1;
        });
        assert_eq!(i, vals.len(), "parameter count mismatch");
    }

    pub fn with_params(&self, vals: &[DenseArray<F>]) -> Self {
        let mut m = self.clone();
        m.set_params(vals);
        m
    }

    /// Block evaluations one sample costs: B inverse blocks plus the denoise
    /// block when present.
    pub fn blocks_per_sample(&self) -> u64 {
        (self.cfg.forward_blocks + usize::from(self.cfg.denoise)) as u64
    }
}

/// Hidden states `h^{B-1} ... h^0` plus the reconstruction.
#[derive(Clone, Debug)]
pub struct ReverseTrajectory<F: Real> {
    /// Computation order: `hiddens[0] = h^{B-1}`, `hiddens[B-1] = h^0`.
    pub hiddens: Vec<DenseArray<F>>,
    pub reconstruction: DenseArray<F>,
}

impl<F: Real> ReverseTrajectory<F> {
    /// Hidden approximating forward state `i` (h^i).
    pub fn hidden_for_state(&self, i: usize) -> &DenseArray<F> {
        let b = self.hiddens.len();
        &self.hiddens[b - 1 - i]
    }
}

/// Conditioning token ids for one pass: class tokens plus the two guidance
/// tokens embedded from the scalar (w, w_d) values.
pub struct CondTokens {
    pub cls: Id,
    pub gw: Id,
    pub gwd: Id,
}

pub fn taped_cond_tokens<F: Real>(
    t: &mut Tape<F>,
    bound: &BoundReverse,
    labels: &[usize],
    w: &[f64],
    wd: &[f64],
    cfg: &ReverseConfig,
) -> CondTokens {
    let n = labels.len();
    let cls = t.gather0(bound.cls, labels);
    let wv: Vec<F> = w.iter().map(|&v| F::from_f64(v)).collect();
    let wdv: Vec<F> = wd.iter().map(|&v| F::from_f64(v)).collect();
    let w_in = t.constant(DenseArray::new(vec![n, 1, 1], wv).unwrap());
    let wd_in = t.constant(DenseArray::new(vec![n, 1, 1], wdv).unwrap());
    let gw = linear_fwd(t, w_in, &bound.w_embed);
    let gwd = linear_fwd(t, wd_in, &bound.wd_embed);
    let _ = cfg;
    CondTokens { cls, gw, gwd }
}

/// One reverse block forward over a batch, on the tape (training path).
pub fn taped_block_fwd<F: Real>(
    t: &mut Tape<F>,
    s_in: Id,
    cond: &CondTokens,
    blk: &ReverseBlock<Id>,
    cfg: &ReverseConfig,
) -> Id {
    let k = cfg.class_tokens;
    let emb = linear_fwd(t, s_in, &blk.inp);
    let seq = t.concat(cond.cls, cond.gw, 1);
    let seq = t.concat(seq, cond.gwd, 1);
    let seq = t.concat(seq, emb, 1);
    let seq = t.add(seq, blk.pos);
    let mut h = seq;
    for layer in &blk.layers {
        h = encoder_layer_fwd(t, h, layer, cfg.heads, false);
    }
    let data = t.narrow(h, 1, k + ReverseConfig::GUIDANCE_TOKENS, cfg.tokens);
    let delta = linear_fwd(t, data, &blk.out);
    let skip = linear_fwd(t, s_in, &blk.skip);
    t.add(skip, delta)
}

/// Single-stream feedforward pass: exactly B (+1 with denoising) block
/// evaluations per sample, guidance baked into the conditioning. Runs on the
/// lean untaped path; no gradients are involved.
pub fn reverse_pass<F: Real>(
    z: &DenseArray<F>,
    labels: &[usize],
    w: f64,
    w_d: f64,
    model: &ReverseModel<F>,
    counters: &mut EvalCounters,
) -> Result<ReverseTrajectory<F>> {
    let cfg = &model.cfg;
    let n = z.shape()[0];
    if z.shape() != [n, cfg.tokens, cfg.dim] {
        return Err(Error::shape(format!(
            "prior batch {:?} vs layout [{}, {}]",
            z.shape(),
            cfg.tokens,
            cfg.dim
        )));
    }
    if labels.len() != n {
        return Err(Error::shape("labels/batch size mismatch".to_string()));
    }
    let b = cfg.forward_blocks;
    let chunk = cfg.tokens * cfg.dim;
    let mut hidden_bufs: Vec<Vec<F>> = (0..b)
        .map(|j| vec![F::zero(); n * cfg.tokens * cfg.block_out_dim(j)])
        .collect();
    let mut recon = vec![F::zero(); n * chunk];
    for i in 0..n {
        let zi = &z.data()[i * chunk..(i + 1) * chunk];
        let (hiddens, rec) = fast::sample_pass_fast(model, zi, labels[i], w, w_d)?;
        for (j, h) in hiddens.into_iter().enumerate() {
            let hc = cfg.tokens * cfg.block_out_dim(j);
            hidden_bufs[j][i * hc..(i + 1) * hc].copy_from_slice(&h);
        }
        recon[i * chunk..(i + 1) * chunk].copy_from_slice(&rec);
        counters.reverse_block_calls += model.blocks_per_sample();
    }
    let hiddens = hidden_bufs
        .into_iter()
        .enumerate()
        .map(|(j, buf)| {
            DenseArray::new(vec![n, cfg.tokens, cfg.block_out_dim(j)], buf).expect("hidden shape")
        })
        .collect();
    Ok(ReverseTrajectory {
        hiddens,
        reconstruction: DenseArray::new(vec![n, cfg.tokens, cfg.dim], recon)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_rev_cfg(denoise: bool) -> ReverseConfig {
        ReverseConfig {
            forward_blocks: 3,
            tokens: 2,
            dim: 1,
            layers: 1,
            width: 8,
            heads: 2,
            class_tokens: 1,
            classes: 2,
            hidden_mode: HiddenMode::Hidden,
            denoise,
        }
    }

    #[test]
    fn pass_is_deterministic_and_counts_blocks() {
        let mut rng = Rng::new(31);
        let model = ReverseModel::<f64>::init(tiny_rev_cfg(true), &mut rng).unwrap();
        let z = rng.gaussian::<f64>(&[4, 2, 1]);
        let labels = vec![0, 1, 0, 1];
        let mut c1 = EvalCounters::default();
        let a = reverse_pass(&z, &labels, 0.5, 2.0, &model, &mut c1).unwrap();
        let mut c2 = EvalCounters::default();
        let b = reverse_pass(&z, &labels, 0.5, 2.0, &model, &mut c2).unwrap();
        assert_eq!(a.reconstruction.data(), b.reconstruction.data());
        assert_eq!(c1.reverse_block_calls, 4 * 4); // (B + 1) per sample
        assert_eq!(a.hiddens.len(), 3);
        // hidden widths: wide trunk until the last inverse block
        assert_eq!(a.hiddens[0].shape(), &[4, 2, 8]);
        assert_eq!(a.hiddens[2].shape(), &[4, 2, 1]);
    }

    #[test]
    fn no_denoise_returns_h0_as_reconstruction() {
        let mut rng = Rng::new(32);
        let model = ReverseModel::<f64>::init(tiny_rev_cfg(false), &mut rng).unwrap();
        let z = rng.gaussian::<f64>(&[2, 2, 1]);
        let mut c = EvalCounters::default();
        let out = reverse_pass(&z, &[0, 1], 0.0, 0.0, &model, &mut c).unwrap();
        assert_eq!(out.reconstruction.data(), out.hiddens[2].data());
        assert_eq!(c.reverse_block_calls, 2 * 3);
    }

    #[test]
    fn input_space_mode_keeps_every_hidden_in_input_dims() {
        let mut rng = Rng::new(33);
        let cfg = ReverseConfig {
            hidden_mode: HiddenMode::InputSpace,
            ..tiny_rev_cfg(true)
        };
        let model = ReverseModel::<f64>::init(cfg, &mut rng).unwrap();
        assert!(model.heads.is_empty());
        let z = rng.gaussian::<f64>(&[2, 2, 1]);
        let mut c = EvalCounters::default();
        let out = reverse_pass(&z, &[0, 0], 0.0, 0.0, &model, &mut c).unwrap();
        for h in &out.hiddens {
            assert_eq!(h.shape(), &[2, 2, 1]);
        }
    }

    #[test]
    fn fast_path_matches_taped_blocks() {
        // The untaped inference path must agree with the taped training path
        // (single conditional stream) to float precision.
        let mut rng = Rng::new(35);
        let mut model = ReverseModel::<f64>::init(tiny_rev_cfg(true), &mut rng).unwrap();
        for b in &mut model.blocks {
            b.out = crate::numerics::nn::init_linear(&mut rng, model.cfg.width, b.out.w.shape()[1]);
        }
        if let Some(d) = &mut model.denoise {
            d.out = crate::numerics::nn::init_linear(&mut rng, model.cfg.width, model.cfg.dim);
        }
        let z = rng.gaussian::<f64>(&[3, 2, 1]);
        let labels = vec![0usize, 1, 0];
        let (w, wd) = (0.7, 3.0);
        let mut c = EvalCounters::default();
        let fastout = reverse_pass(&z, &labels, w, wd, &model, &mut c).unwrap();

        let n = labels.len();
        let mut t = Tape::new();
        let bound = model.bind(&mut t, false);
        let cond = taped_cond_tokens(&mut t, &bound, &labels, &vec![w; n], &vec![wd; n], &model.cfg);
        let zi = t.leaf(z, false);
        let mut s = zi;
        for (j, blk) in bound.blocks.iter().enumerate() {
            s = taped_block_fwd(&mut t, s, &cond, blk, &model.cfg);
            for (a, b) in fastout.hiddens[j].data().iter().zip(t.value(s).data()) {
                assert!((a - b).abs() < 1e-12, "hidden {j} diverged: {a} vs {b}");
            }
        }
        let d = bound.denoise.as_ref().unwrap();
        let x = taped_block_fwd(&mut t, s, &cond, d, &model.cfg);
        for (a, b) in fastout.reconstruction.data().iter().zip(t.value(x).data()) {
            assert!((a - b).abs() < 1e-12, "reconstruction diverged");
        }
    }

    #[test]
    fn guidance_scale_conditioning_changes_output() {
        let mut rng = Rng::new(34);
        let mut model = ReverseModel::<f64>::init(tiny_rev_cfg(true), &mut rng).unwrap();
        // nonzero guidance embedding so the w token matters
        model.w_embed = crate::numerics::nn::init_linear(&mut rng, 1, model.cfg.width);
        // output heads must be nonzero for the trunk to reach the output
        for b in &mut model.blocks {
            b.out = crate::numerics::nn::init_linear(&mut rng, model.cfg.width, b.out.w.shape()[1]);
        }
        let z = rng.gaussian::<f64>(&[1, 2, 1]);
        let mut c = EvalCounters::default();
        let a = reverse_pass(&z, &[1], 0.0, 0.0, &model, &mut c).unwrap();
        let b = reverse_pass(&z, &[1], 1.0, 0.0, &model, &mut c).unwrap();
        assert_ne!(a.reconstruction.data(), b.reconstruction.data());
    }
}
