//! Training-time classifier-free guidance algebra.
//!
//! A guided block extrapolates its conditional output against the
//! unconditional one; the unguided output is recoverable from the guided pair
//! exactly, which is what the training loss supervises. The unconditional
//! branch sits under stop-gradient during training.

use crate::error::{Error, Result};
use crate::numerics::array::{zip_broadcast, DenseArray, Real};
use crate::numerics::tape::{Id, Tape};

/// `(1 + w) * cond - w * uncond`, in the `cond + w * (cond - uncond)` form.
pub fn guided_block<F: Real>(
    cond: &DenseArray<F>,
    uncond: &DenseArray<F>,
    w: f64,
) -> Result<DenseArray<F>> {
    let w = F::from_f64(w);
    zip_broadcast(cond, uncond, |c, u| c + w * (c - u))
}

/// Inverts [`guided_block`]: `(guided + w * uncond) / (1 + w)`. Composing the
/// two returns the conditional output.
pub fn unguided_recovery<F: Real>(
    guided_cond: &DenseArray<F>,
    guided_uncond: &DenseArray<F>,
    w: f64,
) -> Result<DenseArray<F>> {
    if w < 0.0 {
        return Err(Error::invalid("guidance scale must be >= 0"));
    }
    let wf = F::from_f64(w);
    let inv = F::one() / (F::one() + wf);
    zip_broadcast(guided_cond, guided_uncond, |g, u| (g + wf * u) * inv)
}

/// Taped guided step with per-sample scales `w_eff: [N, 1, 1]` and the
/// unconditional branch stop-gradiented: returns `(guided, recovered)` where
/// `guided` propagates to the next block and `recovered` feeds the loss.
pub fn guided_step<F: Real>(t: &mut Tape<F>, cond: Id, uncond: Id, w_eff: Id) -> (Id, Id) {
    let u_sg = t.stop_grad(uncond);
    let diff = t.sub(cond, u_sg);
    let scaled = t.mul(diff, w_eff);
    let guided = t.add(cond, scaled);
    // (guided + w * sg(uncond)) / (1 + w)
    let wu = t.mul(u_sg, w_eff);
    let num = t.add(guided, wu);
    let onef = t.constant(DenseArray::full(t.value(w_eff).shape(), F::one()));
    let denom = t.add(onef, w_eff);
    let recovered = t.div(num, denom);
    (guided, recovered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    #[test]
    fn guided_block_arithmetic() {
        // w = 0 returns cond; equal branches are a fixed point; the scalar toy
        // case 1.6 * 2 - 0.6 * 1 = 2.6.
        let c = DenseArray::scalar(2.0f64);
        let u = DenseArray::scalar(1.0f64);
        assert_eq!(guided_block(&c, &u, 0.0).unwrap().item(), 2.0);
        assert_eq!(guided_block(&c, &c, 3.7).unwrap().item(), 2.0);
        let g = guided_block(&c, &u, 0.6).unwrap();
        assert!((g.item() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn recovery_inverts_guidance_exactly() {
        let c = DenseArray::scalar(2.0f64);
        let u = DenseArray::scalar(1.0f64);
        let w = 0.6;
        let g = guided_block(&c, &u, w).unwrap();
        let r = unguided_recovery(&g, &u, w).unwrap();
        assert!((r.item() - 2.0).abs() < 1e-12);
        // w = 0 passthrough and the degenerate equal-branch case
        assert_eq!(unguided_recovery(&g, &u, 0.0).unwrap().item(), g.item());
        let same = unguided_recovery(&c, &c, 1.3).unwrap();
        assert!((same.item() - 2.0).abs() < 1e-12);
        assert!(unguided_recovery(&c, &u, -0.1).is_err());
    }

    #[test]
    fn recovery_composes_over_random_cases() {
        let mut rng = Rng::new(51);
        for _ in 0..200 {
            let c: DenseArray<f64> = rng.gaussian(&[3]);
            let u: DenseArray<f64> = rng.gaussian(&[3]);
            let w = rng.uniform_scalar(0.0, 5.0);
            let g = guided_block(&c, &u, w).unwrap();
            let r = unguided_recovery(&g, &u, w).unwrap();
            for (rv, cv) in r.data().iter().zip(c.data().iter()) {
                assert!((rv - cv).abs() <= 1e-6 * cv.abs().max(1.0));
            }
        }
    }

    #[test]
    fn taped_step_blocks_uncond_gradient() {
        // d(guided)/d(uncond) must be exactly zero through the stop-gradient,
        // and recovered must equal cond.
        let mut t = Tape::<f64>::new();
        let cond = t.leaf(DenseArray::new(vec![1, 1, 1], vec![2.0]).unwrap(), true);
        let uncond = t.leaf(DenseArray::new(vec![1, 1, 1], vec![1.0]).unwrap(), true);
        let w = t.constant(DenseArray::new(vec![1, 1, 1], vec![0.6]).unwrap());
        let (guided, recovered) = guided_step(&mut t, cond, uncond, w);
        assert!((t.value(guided).item() - 2.6).abs() < 1e-12);
        assert!((t.value(recovered).item() - 2.0).abs() < 1e-12);
        let loss = t.sum_all(guided);
        let g = t.grad(loss, &[cond, uncond]).unwrap();
        assert!((g.grads[0].item() - 1.6).abs() < 1e-12);
        assert_eq!(g.grads[1].item(), 0.0);
        assert!(g.off_tape[1]);
    }
}
