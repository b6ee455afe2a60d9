//! Seeded, splittable random source.
//!
//! SplitMix64 underneath: the integer stream is a pure function of the seed,
//! so equal seeds reproduce equal sample streams bit-for-bit at a given
//! precision. Normals come from Box-Muller with no cached spare, keeping the
//! state a single u64.

use super::array::{DenseArray, Real};

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Independent stream derived from this one.
    pub fn split(&mut self) -> Rng {
        Rng {
            state: self.next_u64() ^ 0xA5A5A5A5A5A5A5A5,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn uniform_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard-normal draw (computed in f64, rounded to F).
    pub fn gaussian_scalar<F: Real>(&mut self) -> F {
        let u1 = self.uniform_open_f64();
        let u2 = self.uniform_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        F::from_f64(r * (2.0 * std::f64::consts::PI * u2).cos())
    }

    /// i.i.d. standard normal array.
    pub fn gaussian<F: Real>(&mut self, shape: &[usize]) -> DenseArray<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.gaussian_scalar()).collect();
        DenseArray::new(shape.to_vec(), data).expect("shape/product invariant")
    }

    /// Uniform [lo, hi) array.
    pub fn uniform<F: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> DenseArray<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(lo + (hi - lo) * self.uniform_f64()))
            .collect();
        DenseArray::new(shape.to_vec(), data).expect("shape/product invariant")
    }

    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xa: DenseArray<f64> = a.gaussian(&[257]);
        let xb: DenseArray<f64> = b.gaussian(&[257]);
        assert_eq!(xa.data(), xb.data());
        let ya: DenseArray<f32> = a.gaussian(&[64]);
        let yb: DenseArray<f32> = b.gaussian(&[64]);
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn empty_shape_gives_empty_array() {
        let mut r = Rng::new(7);
        let x: DenseArray<f64> = r.gaussian(&[0]);
        assert_eq!(x.numel(), 0);
        assert_eq!(x.shape(), &[0]);
    }

    #[test]
    fn gaussian_moments_at_1e5() {
        let mut r = Rng::new(9001);
        let x: DenseArray<f64> = r.gaussian(&[100_000]);
        let n = x.numel() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn split_streams_differ() {
        let mut a = Rng::new(5);
        let mut b = a.split();
        let xa: DenseArray<f64> = a.gaussian(&[16]);
        let xb: DenseArray<f64> = b.gaussian(&[16]);
        assert_ne!(xa.data(), xb.data());
    }
}
