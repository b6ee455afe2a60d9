//! Dense-array math, reverse-mode differentiation, seeded randomness, and
//! the attention/MLP primitives the conditioners are built from.

pub mod adam;
pub mod array;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod rng;
pub mod tape;
pub(crate) mod vecmath;

pub use adam::{adam_step, ema_update, AdamState};
pub use array::{DenseArray, Real};
pub use rng::Rng;
pub use tape::{Grads, Id, Tape};

#[cfg(test)]
mod tests {
    use super::gradcheck::{fd_grad, max_rel_err};
    use super::*;

    fn scalar_eval<F: Real>(
        build: impl Fn(&mut Tape<F>, Id) -> Id,
        x: &DenseArray<F>,
    ) -> (F, DenseArray<F>) {
        let mut t = Tape::new();
        let xi = t.leaf(x.clone(), true);
        let out = build(&mut t, xi);
        let loss = t.value(out).item();
        let g = t.grad(out, &[xi]).unwrap();
        (loss, g.grads.into_iter().next().unwrap())
    }

    /// Runs autodiff vs. central differences for one op under many seeds.
    fn check_op(
        name: &str,
        build: impl Fn(&mut Tape<f64>, Id) -> Id + Copy,
        sampler: impl Fn(&mut Rng) -> DenseArray<f64>,
        cases: usize,
        tol: f64,
    ) {
        let mut rng = Rng::new(0xC0FFEE ^ name.len() as u64);
        for case in 0..cases {
            let x = sampler(&mut rng);
            let (_, ad) = scalar_eval(build, &x);
            let fd = fd_grad(
                &mut |xp: &DenseArray<f64>| {
                    let mut t = Tape::new();
                    let xi = t.leaf(xp.clone(), false);
                    let out = build(&mut t, xi);
                    t.value(out).item()
                },
                &x,
                1e-5,
            );
            let err = max_rel_err(ad.data(), fd.data());
            assert!(err < tol, "{name} case {case}: rel err {err}");
        }
    }

    #[test]
    fn analytic_square_gradient() {
        // d(x^2)/dx at x = 3 is 6
        let x = DenseArray::scalar(3.0f64);
        let (_, g) = scalar_eval(|t, xi| t.mul(xi, xi), &x);
        assert!((g.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_exp_gradient() {
        // d(exp(x))/dx at x = 0 is 1
        let x = DenseArray::scalar(0.0f64);
        let (_, g) = scalar_eval(|t, xi| t.exp(xi), &x);
        assert!((g.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_composite_graph_matches_central_differences() {
        // exp/mul/add/sum composite, step 1e-4 at 64-bit, rel err < 1e-6.
        let build = |t: &mut Tape<f64>, x: Id| {
            let e = t.exp(x);
            let m = t.mul(e, x);
            let a = t.add(m, e);
            t.sum_all(a)
        };
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let x = rng.uniform::<f64>(&[5], -1.0, 1.0);
            let (_, ad) = scalar_eval(build, &x);
            let fd = fd_grad(
                &mut |xp| {
                    let mut t = Tape::new();
                    let xi = t.leaf(xp.clone(), false);
                    let out = build(&mut t, xi);
                    t.value(out).item()
                },
                &x,
                1e-4,
            );
            assert!(max_rel_err(ad.data(), fd.data()) < 1e-6);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let small = |r: &mut Rng| r.uniform::<f64>(&[2, 3], -0.9, 0.9);
        let pos = |r: &mut Rng| r.uniform::<f64>(&[2, 3], 0.2, 2.0);
        let cases = 100;
        let tol = 1e-6;

        check_op("add", |t, x| { let c = t.scalar(0.7); let y = t.add(x, c); t.sum_all(y) }, small, cases, tol);
        check_op("sub", |t, x| { let c = t.scalar(0.7); let y = t.sub(x, c); t.sum_all(y) }, small, cases, tol);
        check_op("mul", |t, x| { let y = t.mul(x, x); t.sum_all(y) }, small, cases, tol);
        check_op("div", |t, x| { let c = t.scalar(1.3); let y = t.div(c, x); t.sum_all(y) }, pos, cases, tol);
        check_op("neg", |t, x| { let y = t.neg(x); t.sum_all(y) }, small, cases, tol);
        check_op("exp", |t, x| { let y = t.exp(x); t.sum_all(y) }, small, cases, tol);
        check_op("ln", |t, x| { let y = t.ln(x); t.sum_all(y) }, pos, cases, tol);
        check_op("sqrt", |t, x| { let y = t.sqrt(x); t.sum_all(y) }, pos, cases, tol);
        check_op("tanh", |t, x| { let y = t.tanh(x); t.sum_all(y) }, small, cases, tol);
        check_op("silu", |t, x| { let y = t.silu(x); t.sum_all(y) }, small, cases, tol);
        check_op("scale", |t, x| { let y = t.scale(x, -2.5); t.sum_all(y) }, small, cases, tol);
        check_op("mean_all", |t, x| t.mean_all(x), small, cases, tol);
        check_op(
            "clamp_interior",
            |t, x| {
                let y = t.clamp(x, -2.0, 2.0);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
        check_op(
            "softmax",
            |t, x| {
                let p = t.softmax_lastdim(x);
                let w = t.mul(p, p);
                t.sum_all(w)
            },
            |r| r.uniform::<f64>(&[2, 4], -1.0, 1.0),
            cases,
            tol,
        );
        check_op(
            "matmul",
            |t, x| {
                let xt = t.swap_axes(x, 0, 1);
                let y = t.matmul(x, xt);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
        check_op(
            "narrow_concat_flip",
            |t, x| {
                let a = t.narrow(x, 1, 0, 2);
                let b = t.narrow(x, 1, 1, 2);
                let c = t.concat(a, b, 1);
                let f = t.flip(c, 0);
                let y = t.mul(f, f);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
        check_op(
            "sum_trailing_mean_trailing",
            |t, x| {
                let s = t.sum_trailing(x);
                let m = t.mean_trailing(x);
                let y = t.mul(s, m);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
        check_op(
            "sum_last_keepdim",
            |t, x| {
                let s = t.sum_last_keepdim(x);
                let y = t.mul(s, s);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
        check_op(
            "reshape_swap",
            |t, x| {
                let r = t.reshape(x, &[3, 2]);
                let s = t.swap_axes(r, 0, 1);
                let y = t.mul(s, s);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
        check_op(
            "gather0",
            |t, x| {
                let gsel = t.gather0(x, &[1, 0, 1]);
                let y = t.mul(gsel, gsel);
                t.sum_all(y)
            },
            small,
            cases,
            tol,
        );
    }

    #[test]
    fn clamp_gradient_is_zero_outside_range() {
        let x = DenseArray::from_vec(vec![-3.0f64, 0.5, 3.0]);
        let (_, g) = scalar_eval(
            |t, xi| {
                let y = t.clamp(xi, -1.0, 1.0);
                t.sum_all(y)
            },
            &x,
        );
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn stop_grad_blocks_gradient() {
        let x = DenseArray::scalar(2.0f64);
        let mut t = Tape::new();
        let xi = t.leaf(x, true);
        let s = t.stop_grad(xi);
        let y = t.mul(xi, s); // d/dx [x * sg(x)] = sg(x) = 2
        let g = t.grad(y, &[xi]).unwrap();
        assert_eq!(g.grads[0].item(), 2.0);
        assert!(!g.off_tape[0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::<f64>::from_vec(vec![1.0, 2.0]), true);
        assert!(t.grad(x, &[x]).is_err());
    }

    #[test]
    fn unreachable_input_gets_zero_gradient_and_flag() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(DenseArray::scalar(1.0), true);
        let z = t.leaf(DenseArray::scalar(5.0), true);
        let y = t.mul(x, x);
        let g = t.grad(y, &[x, z]).unwrap();
        assert!(!g.off_tape[0]);
        assert!(g.off_tape[1]);
        assert_eq!(g.grads[1].item(), 0.0);
        assert!(g.any_off_tape());
    }

    #[test]
    fn causal_attention_single_token_returns_v() {
        let mut rng = Rng::new(3);
        let q = rng.gaussian::<f64>(&[1, 4]);
        let k = rng.gaussian::<f64>(&[1, 4]);
        let v = rng.gaussian::<f64>(&[1, 4]);
        let out = nn::causal_attention(&q, &k, &v).unwrap();
        for (o, e) in out.data().iter().zip(v.data().iter()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = Rng::new(5);
        let q = rng.gaussian::<f64>(&[4, 3]);
        let k = rng.gaussian::<f64>(&[4, 3]);
        let mut v = rng.gaussian::<f64>(&[4, 3]);
        let base = nn::causal_attention(&q, &k, &v).unwrap();
        // Perturb v at position 3; rows 0..3 must not move at all.
        for j in 0..3 {
            v.data_mut()[3 * 3 + j] += 10.0;
        }
        let moved = nn::causal_attention(&q, &k, &v).unwrap();
        for t in 0..3 {
            for j in 0..3 {
                assert_eq!(base.data()[t * 3 + j], moved.data()[t * 3 + j]);
            }
        }
    }

    #[test]
    fn uniform_logits_average_prefix() {
        // q = 0 makes every score equal: row 2 averages v rows 0..2.
        let q = DenseArray::<f64>::zeros(&[3, 2]);
        let k = DenseArray::<f64>::ones(&[3, 2]);
        let v = DenseArray::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = nn::causal_attention(&q, &k, &v).unwrap();
        assert!((out.data()[4] - 3.0).abs() < 1e-12);
        assert!((out.data()[5] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn causal_attention_shape_mismatch_rejected() {
        let q = DenseArray::<f64>::zeros(&[3, 2]);
        let k = DenseArray::<f64>::zeros(&[2, 2]);
        let v = DenseArray::<f64>::zeros(&[3, 2]);
        assert!(nn::causal_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn causality_jacobian_exact_zero_future() {
        // Jacobian of output position t w.r.t. v at position s > t is exactly 0,
        // for all T <= 16 (subsampled here; full sweep lives in the acceptance suite).
        for tlen in [2usize, 5, 16] {
            let mut rng = Rng::new(tlen as u64);
            let q = rng.gaussian::<f64>(&[tlen, 2]);
            let k = rng.gaussian::<f64>(&[tlen, 2]);
            let v = rng.gaussian::<f64>(&[tlen, 2]);
            let mut t = Tape::new();
            let (qi, ki, vi) = (t.leaf(q, true), t.leaf(k, true), t.leaf(v, true));
            let out = nn::causal_attention_taped(&mut t, qi, ki, vi);
            let probe_t = tlen / 2;
            let row = t.narrow(out, 0, probe_t, 1);
            let loss = t.sum_all(row);
            let g = t.grad(loss, &[qi, ki, vi]).unwrap();
            for s in probe_t + 1..tlen {
                for j in 0..2 {
                    assert_eq!(g.grads[1].data()[s * 2 + j], 0.0, "k leak at {s}");
                    assert_eq!(g.grads[2].data()[s * 2 + j], 0.0, "v leak at {s}");
                }
            }
        }
    }
}
