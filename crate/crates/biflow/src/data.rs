//! Synthetic datasets: 2-D toy distributions plus a tiny procedural digit
//! grid, all reproducible from a seed.

use crate::error::{Error, Result};
use crate::numerics::array::{DenseArray, Real};
use crate::numerics::rng::Rng;

/// Labelled samples in token layout `[N, T, d]`.
#[derive(Clone, Debug)]
pub struct Dataset<F: Real> {
    pub samples: DenseArray<F>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
    /// Per flattened feature dim: (lo, hi), the sample extent widened by a
    /// 20% margin on each side.
    pub bbox: Vec<(f64, f64)>,
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[2]
    }

    /// Copies the rows at `idx` into a batch.
    pub fn gather(&self, idx: &[usize]) -> (DenseArray<F>, Vec<usize>) {
        let chunk = self.tokens() * self.dim();
        let mut data = Vec::with_capacity(idx.len() * chunk);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.samples.data()[i * chunk..(i + 1) * chunk]);
            labels.push(self.labels[i]);
        }
        (
            DenseArray::new(vec![idx.len(), self.tokens(), self.dim()], data).unwrap(),
            labels,
        )
    }

    /// True when every flattened coordinate of `row` lies inside the box.
    pub fn in_bbox(&self, row: &[F]) -> bool {
        row.iter().zip(self.bbox.iter()).all(|(&v, &(lo, hi))| {
            let v = Real::to_f64(v);
            v >= lo && v <= hi
        })
    }

    fn with_bbox(mut self) -> Self {
        let chunk = self.tokens() * self.dim();
        let mut lo = vec![f64::INFINITY; chunk];
        let mut hi = vec![f64::NEG_INFINITY; chunk];
        for row in self.samples.data().chunks_exact(chunk) {
            for (j, &v) in row.iter().enumerate() {
                let v = Real::to_f64(v);
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        self.bbox = lo
            .into_iter()
            .zip(hi)
            .map(|(l, h)| {
                let margin = 0.2 * (h - l).max(1e-6);
                (l - margin, h + margin)
            })
            .collect();
        self
    }
}

/// Builds one of the named datasets; identical (seed, n, name) gives an
/// identical dataset. `tiny_digits` uses 2x2 patches (T = 16, d = 4); see
/// [`tiny_digits`] for other patch sizes.
pub fn make_dataset<F: Real>(name: &str, n: usize, rng: &mut Rng) -> Result<Dataset<F>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    match name {
        "two_moons" => Ok(two_moons(n, rng)),
        "checkerboard" => Ok(checkerboard(n, rng)),
        "gauss_grid" => Ok(gauss_grid(n, rng)),
        "tiny_digits" => tiny_digits(n, rng, 2),
        other => Err(Error::invalid(format!("unknown dataset '{other}'"))),
    }
}

/// Two interleaved half-circles, one class per moon. Tokens are single
/// coordinates: layout `[N, 2, 1]`.
pub fn two_moons<F: Real>(n: usize, rng: &mut Rng) -> Dataset<F> {
    let noise = 0.06;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.uniform_scalar(0.0, std::f64::consts::PI);
        let (x, y) = if i % 2 == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        data.push(F::from_f64(x + noise * rng.gaussian_scalar::<f64>()));
        data.push(F::from_f64(y + noise * rng.gaussian_scalar::<f64>()));
        labels.push(i % 2);
    }
    Dataset {
        samples: DenseArray::new(vec![n, 2, 1], data).unwrap(),
        labels,
        classes: 2,
        name: "two_moons".into(),
        bbox: Vec::new(),
    }
    .with_bbox()
}

/// Uniform points on [-2, 2)^2 with the checker parity as a 2-class label.
pub fn checkerboard<F: Real>(n: usize, rng: &mut Rng) -> Dataset<F> {
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_scalar(-2.0, 2.0);
        let y = rng.uniform_scalar(-2.0, 2.0);
        let parity = ((x.floor() + y.floor()) as i64).rem_euclid(2) as usize;
        data.push(F::from_f64(x));
        data.push(F::from_f64(y));
        labels.push(parity);
    }
    Dataset {
        samples: DenseArray::new(vec![n, 2, 1], data).unwrap(),
        labels,
        classes: 2,
        name: "checkerboard".into(),
        bbox: Vec::new(),
    }
    .with_bbox()
}

pub const GAUSS_GRID_STD: f64 = 0.25;
pub const GAUSS_GRID_SPACING: f64 = 2.0;

/// Center of grid component `k` in [0, 9).
pub fn gauss_grid_center(k: usize) -> (f64, f64) {
    let col = (k % 3) as f64 - 1.0;
    let row = (k / 3) as f64 - 1.0;
    (col * GAUSS_GRID_SPACING, row * GAUSS_GRID_SPACING)
}

/// 3x3 grid of isotropic Gaussians, 9 classes, round-robin class assignment
/// so component counts stay balanced.
pub fn gauss_grid<F: Real>(n: usize, rng: &mut Rng) -> Dataset<F> {
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 9;
        let (cx, cy) = gauss_grid_center(k);
        data.push(F::from_f64(cx + GAUSS_GRID_STD * rng.gaussian_scalar::<f64>()));
        data.push(F::from_f64(cy + GAUSS_GRID_STD * rng.gaussian_scalar::<f64>()));
        labels.push(k);
    }
    Dataset {
        samples: DenseArray::new(vec![n, 2, 1], data).unwrap(),
        labels,
        classes: 9,
        name: "gauss_grid".into(),
        bbox: Vec::new(),
    }
    .with_bbox()
}

/// 8x8 procedural digit glyphs ('#' pixels high, '.' low) with intensity
/// jitter and additive noise. `patch` of 2 gives tokens of 2x2 pixels
/// (T = 16, d = 4); `patch` of 1 gives per-pixel tokens (T = 64, d = 1).
pub fn tiny_digits<F: Real>(n: usize, rng: &mut Rng, patch: usize) -> Result<Dataset<F>> {
    if patch == 0 || 8 % patch != 0 {
        return Err(Error::invalid("patch size must divide 8"));
    }
    let side = 8 / patch;
    let tokens = side * side;
    let dim = patch * patch;
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let glyph = DIGIT_GLYPHS[digit];
        let intensity = 0.75 + 0.25 * rng.uniform_f64();
        let mut pixels = [0.0f64; 64];
        for (r, row) in glyph.iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                let base = if ch == b'#' { intensity } else { -intensity };
                pixels[r * 8 + c] = base + 0.1 * rng.gaussian_scalar::<f64>();
            }
        }
        // patchify row-major: token (pr, pc) holds its patch pixels row-major
        for pr in 0..side {
            for pc in 0..side {
                for dr in 0..patch {
                    for dc in 0..patch {
                        let r = pr * patch + dr;
                        let c = pc * patch + dc;
                        data.push(F::from_f64(pixels[r * 8 + c]));
                    }
                }
            }
        }
        labels.push(digit);
    }
    Ok(Dataset {
        samples: DenseArray::new(vec![n, tokens, dim], data).unwrap(),
        labels,
        classes: 10,
        name: "tiny_digits".into(),
        bbox: Vec::new(),
    }
    .with_bbox())
}

const DIGIT_GLYPHS: [[&str; 8]; 10] = [
    [
        "........", //
        ".######.", //
        ".#....#.", //
        ".#....#.", //
        ".#....#.", //
        ".#....#.", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        "...##...", //
        "..###...", //
        "...##...", //
        "...##...", //
        "...##...", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        "......#.", //
        ".######.", //
        ".#......", //
        ".#......", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        "......#.", //
        "..#####.", //
        "......#.", //
        "......#.", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        ".#....#.", //
        ".#....#.", //
        ".######.", //
        "......#.", //
        "......#.", //
        "......#.", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        ".#......", //
        ".######.", //
        "......#.", //
        "......#.", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        ".#......", //
        ".######.", //
        ".#....#.", //
        ".#....#.", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        "......#.", //
        ".....#..", //
        "....#...", //
        "...#....", //
        "...#....", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        ".#....#.", //
        ".######.", //
        ".#....#.", //
        ".#....#.", //
        ".######.", //
        "........",
    ],
    [
        "........", //
        ".######.", //
        ".#....#.", //
        ".######.", //
        "......#.", //
        "......#.", //
        ".######.", //
        "........",
    ],
];
