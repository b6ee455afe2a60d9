//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"BIFL"
//! version u32 (currently 1)
//! kind    u8: 1 = forward only, 2 = forward + reverse
//! config  u32 length + canonical `key = value` UTF-8 text
//! rng     u64 state
//! step    u64 counter
//! arrays  forward params, forward EMA [, reverse params, reverse EMA]
//!         each section: u32 count, then per array
//!         u32 name length + name, u32 ndim, u32 dims.., f32 LE values
//! ```
//!
//! Values are stored at 32 bits; loading into a 64-bit build widens exactly.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::numerics::array::{DenseArray, Real};
use crate::reverse::ReverseModel;

use super::config::ExperimentConfig;

pub const MAGIC: &[u8; 4] = b"BIFL";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Forward,
    ForwardReverse,
}

/// Deserialized checkpoint with models rebuilt from the config snapshot.
#[derive(Debug)]
pub struct Checkpoint<F: Real> {
    pub config: ExperimentConfig,
    pub forward: FlowModel<F>,
    pub forward_ema: Vec<DenseArray<F>>,
    pub reverse: Option<ReverseModel<F>>,
    pub reverse_ema: Option<Vec<DenseArray<F>>>,
    pub rng_state: u64,
    pub step: u64,
}

impl<F: Real> Checkpoint<F> {
    /// Forward model carrying its EMA weights.
    pub fn forward_eval(&self) -> FlowModel<F> {
        self.forward.with_params(&self.forward_ema)
    }

    pub fn reverse_eval(&self) -> Option<ReverseModel<F>> {
        match (&self.reverse, &self.reverse_ema) {
            (Some(m), Some(e)) => Some(m.with_params(e)),
            _ => None,
        }
    }
}

fn named_params<F: Real>(visit: impl Fn(&mut dyn FnMut(String, &DenseArray<F>))) -> Vec<(String, DenseArray<F>)> {
    let mut out = Vec::new();
    visit(&mut |name, p: &DenseArray<F>| out.push((name, p.clone())));
    out
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_section<F: Real>(buf: &mut Vec<u8>, arrays: &[(String, DenseArray<F>)]) {
    write_u32(buf, arrays.len() as u32);
    for (name, arr) in arrays {
        write_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        write_u32(buf, arr.ndim() as u32);
        for &d in arr.shape() {
            write_u32(buf, d as u32);
        }
        for &v in arr.data() {
            buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
}

/// Serializes models and their EMA shadows to `path`.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    config: &ExperimentConfig,
    forward: &FlowModel<F>,
    forward_ema: &[DenseArray<F>],
    reverse: Option<(&ReverseModel<F>, &[DenseArray<F>])>,
    rng_state: u64,
    step: u64,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, VERSION);
    buf.push(if reverse.is_some() { 2 } else { 1 });
    let text = config.to_text();
    write_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&rng_state.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());

    let fwd_named = named_params(|f| forward.visit(f));
    write_section(&mut buf, &fwd_named);
    let ema_named: Vec<(String, DenseArray<F>)> = fwd_named
        .iter()
        .zip(forward_ema.iter())
        .map(|((n, _), e)| (n.clone(), e.clone()))
        .collect();
    if ema_named.len() != forward_ema.len() {
        return Err(Error::Checkpoint("forward EMA length mismatch".into()));
    }
    write_section(&mut buf, &ema_named);

    if let Some((rev, rev_ema)) = reverse {
        let rev_named = named_params(|f| rev.visit(f));
        write_section(&mut buf, &rev_named);
        let rev_ema_named: Vec<(String, DenseArray<F>)> = rev_named
            .iter()
            .zip(rev_ema.iter())
            .map(|((n, _), e)| (n.clone(), e.clone()))
            .collect();
        if rev_ema_named.len() != rev_ema.len() {
            return Err(Error::Checkpoint("reverse EMA length mismatch".into()));
        }
        write_section(&mut buf, &rev_ema_named);
    }

    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_section<F: Real>(r: &mut Reader) -> Result<Vec<(String, DenseArray<F>)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad array name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::from_f32_exact(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((name, DenseArray::new(shape, data)?));
    }
    Ok(out)
}

/// Fills a model's parameters from a named-array section, demanding an exact
/// name/shape match.
fn fill_from_section<F: Real>(
    expect: &mut Vec<(String, DenseArray<F>)>,
    section: Vec<(String, DenseArray<F>)>,
    what: &str,
) -> Result<Vec<DenseArray<F>>> {
    if expect.len() != section.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} arrays, file has {}",
            expect.len(),
            section.len()
        )));
    }
    let mut vals = Vec::with_capacity(section.len());
    for ((want_name, want_arr), (got_name, got_arr)) in expect.iter().zip(section) {
        if *want_name != got_name {
            return Err(Error::Checkpoint(format!(
                "{what}: expected array '{want_name}', file has '{got_name}'"
            )));
        }
        if want_arr.shape() != got_arr.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: array '{got_name}' has shape {:?}, config implies {:?}",
                got_arr.shape(),
                want_arr.shape()
            )));
        }
        vals.push(got_arr);
    }
    Ok(vals)
}

/// Loads a checkpoint, rebuilding model skeletons from the embedded config
/// and validating every array name and shape against them.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let kind = match r.u8()? {
        1 => CheckpointKind::Forward,
        2 => CheckpointKind::ForwardReverse,
        k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
    };
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
    let config = super::config::parse_config(&cfg_text)?;
    let rng_state = r.u64()?;
    let step = r.u64()?;

    // Skeletons from the config; the init RNG is irrelevant, every value is
    // overwritten from the file.
    let mut seed_rng = crate::numerics::rng::Rng::new(0);
    let mut forward = FlowModel::<F>::init(config.flow_config()?, &mut seed_rng)?;
    let mut expect = named_params(|f| forward.visit(f));
    let fwd_vals = fill_from_section(&mut expect, read_section(&mut r)?, "forward params")?;
    forward.set_params(&fwd_vals);
    let mut expect_ema = named_params(|f| forward.visit(f));
    let forward_ema = fill_from_section(&mut expect_ema, read_section(&mut r)?, "forward ema")?;

    let (reverse, reverse_ema) = match kind {
        CheckpointKind::Forward => (None, None),
        CheckpointKind::ForwardReverse => {
            let mut rev = ReverseModel::<F>::init(config.reverse_config()?, &mut seed_rng)?;
            let mut expect = named_params(|f| rev.visit(f));
            let vals = fill_from_section(&mut expect, read_section(&mut r)?, "reverse params")?;
            rev.set_params(&vals);
            let mut expect_ema = named_params(|f| rev.visit(f));
            let ema = fill_from_section(&mut expect_ema, read_section(&mut r)?, "reverse ema")?;
            (Some(rev), Some(ema))
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last section",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        forward,
        forward_ema,
        reverse,
        reverse_ema,
        rng_state,
        step,
    })
}
