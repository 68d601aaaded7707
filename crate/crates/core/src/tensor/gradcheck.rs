//! Finite-difference gradient checking (64-bit only).

use super::{Tape, TensorId};
use crate::error::{Error, Result};

/// Default central-difference perturbation.
pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// Compare the tape's analytic gradient against central finite differences.
///
/// `build` is called on a fresh tape with a leaf holding the current input
/// values and must return a scalar loss; everything else the function uses
/// (weights, targets, index plans, ...) should be captured by the closure so
/// every call sees identical surroundings.
///
/// Returns the worst coordinate's relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(mut build: F, x0: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("grad_check: eps must be positive, got {eps}")));
    }
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(x0.to_vec(), shape.to_vec(), true)?;
    let loss = build(&mut tape, x)?;
    if tape.numel(loss) != 1 {
        return Err(Error::Invalid(format!(
            "grad_check: loss must be scalar, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(x).expect("input leaf requires grad").to_vec();

    fn eval<F>(build: &mut F, vals: &[f64], shape: &[usize]) -> Result<f64>
    where
        F: FnMut(&mut Tape<f64>, TensorId) -> Result<TensorId>,
    {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vals.to_vec(), shape.to_vec(), false)?;
        let loss = build(&mut tape, x)?;
        Ok(tape.data(loss)[0])
    }

    let mut probe = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let lp = eval(&mut build, &probe, shape)?;
        probe[i] = orig - eps;
        let lm = eval(&mut build, &probe, shape)?;
        probe[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random values bounded away from zero so no coordinate has a
    /// degenerate (structurally tiny) gradient.
    fn gc_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.25..1.25);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    }

    #[test]
    fn quadratic_loss_exact_gradient() {
        // loss = sum(x^2); at [1, 2] the gradient is [2, 4].
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum_all(y))
            },
            &[1.0, 2.0],
            &[2],
            DEFAULT_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic grad_check error {err}");
    }

    #[test]
    fn per_op_gradients_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = gc_vals(&mut rng, 12); // generic fixed weight [4, 3]
        let cases: Vec<(&str, f64)> = vec![
            (
                "matmul",
                grad_check(
                    |t, x| {
                        let wt = t.constant(w.clone(), vec![4, 3])?;
                        let y = t.matmul(x, wt)?;
                        Ok(t.sum_all(y))
                    },
                    &gc_vals(&mut rng, 8),
                    &[2, 4],
                    DEFAULT_GRAD_CHECK_EPS,
                )
                .unwrap(),
            ),
            (
                "gelu",
                grad_check(
                    |t, x| {
                        let y = t.gelu(x);
                        let c = t.constant(vec![0.3, -0.7, 1.1, 0.9, -0.4, 0.6], vec![6])?;
                        let y = t.mul(y, c)?;
                        Ok(t.sum_all(y))
                    },
                    &gc_vals(&mut rng, 6),
                    &[6],
                    DEFAULT_GRAD_CHECK_EPS,
                )
                .unwrap(),
            ),
            (
                "sigmoid",
                grad_check(
                    |t, x| {
                        let y = t.sigmoid(x);
                        Ok(t.sum_all(y))
                    },
                    &gc_vals(&mut rng, 5),
                    &[5],
                    DEFAULT_GRAD_CHECK_EPS,
                )
                .unwrap(),
            ),
            (
                "softmax",
                grad_check(
                    |t, x| {
                        let y = t.softmax_last(x)?;
                        let c = t.constant(vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.7], vec![2, 3])?;
                        let y = t.mul(y, c)?;
                        Ok(t.sum_all(y))
                    },
                    &gc_vals(&mut rng, 6),
                    &[2, 3],
                    DEFAULT_GRAD_CHECK_EPS,
                )
                .unwrap(),
            ),
            (
                "layer_norm",
                grad_check(
                    |t, x| {
                        let g = t.constant(vec![1.3, 0.7, -0.9, 1.1], vec![4])?;
                        let b = t.constant(vec![0.1, -0.2, 0.3, 0.0], vec![4])?;
                        let y = t.layer_norm(x, g, b, 1e-6)?;
                        let c = t.constant(vec![0.9, -0.4, 1.2, 0.8, 0.5, -1.0, 0.3, 0.6], vec![2, 4])?;
                        let y = t.mul(y, c)?;
                        Ok(t.sum_all(y))
                    },
                    &gc_vals(&mut rng, 8),
                    &[2, 4],
                    DEFAULT_GRAD_CHECK_EPS,
                )
                .unwrap(),
            ),
            (
                "mean_axis",
                grad_check(
                    |t, x| {
                        let y = t.mean_axis(x, 1)?;
                        let y = t.mul(y, y)?;
                        Ok(t.sum_all(y))
                    },
                    &gc_vals(&mut rng, 12),
                    &[2, 3, 2],
                    DEFAULT_GRAD_CHECK_EPS,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in cases {
            assert!(err < 1e-5, "{name} grad_check error {err} >= 1e-5");
        }
    }

    #[test]
    fn composite_mlp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = gc_vals(&mut rng, 4 * 5);
        let b1 = gc_vals(&mut rng, 5);
        let w2 = gc_vals(&mut rng, 5 * 3);
        let x0 = gc_vals(&mut rng, 2 * 4);
        let err = grad_check(
            |t, x| {
                let w1 = t.constant(w1.clone(), vec![4, 5])?;
                let b1 = t.constant(b1.clone(), vec![5])?;
                let w2 = t.constant(w2.clone(), vec![5, 3])?;
                let h = t.matmul(x, w1)?;
                let h = t.add(h, b1)?;
                let h = t.gelu(h);
                let y = t.matmul(h, w2)?;
                let y = t.softmax_last(y)?;
                let pick = t.constant(vec![1.0, -1.0, 2.0, 0.5, 1.5, -0.5], vec![2, 3])?;
                let y = t.mul(y, pick)?;
                Ok(t.sum_all(y))
            },
            &x0,
            &[2, 4],
            DEFAULT_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "composite MLP grad_check error {err}");
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // Forward x^2 paired with a deliberately wrong derivative (3x instead
        // of 2x) must blow past the tolerance: the checker is a live oracle.
        let err = grad_check(
            |t, x| {
                let y = t.custom_unary(x, |v| v * v, |v| 3.0 * v);
                Ok(t.sum_all(y))
            },
            &[0.7, -1.1, 0.4],
            &[3],
            DEFAULT_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err > 1e-2, "negative control unexpectedly passed: {err}");
    }

    #[test]
    fn f32_and_f64_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gc_vals(&mut rng, 8);
        let w = gc_vals(&mut rng, 8 * 4);
        fn run<T: super::super::Scalar>(x: &[f64], w: &[f64]) -> f64 {
            let mut t: Tape<T> = Tape::new();
            let xt = t
                .leaf(x.iter().map(|&v| T::from_f64(v)).collect(), vec![2, 4], false)
                .unwrap();
            let wt = t
                .leaf(w.iter().map(|&v| T::from_f64(v)).collect(), vec![4, 8], false)
                .unwrap();
            let h = t.matmul(xt, wt).unwrap();
            let h = t.gelu(h);
            let l = t.mean_all(h);
            t.data(l)[0].to_f64()
        }
        let lo = run::<f32>(&x, &w);
        let hi = run::<f64>(&x, &w);
        let rel = (lo - hi).abs() / hi.abs().max(1e-12);
        assert!(rel < 1e-4, "f32 vs f64 forward disagreement: {rel}");
    }

    proptest::proptest! {
        // Randomized dims <= 8: linear + gelu chain. The bound here is
        // looser than the curated fixtures' 1e-5 because a random
        // pre-activation can land near GELU's derivative root (z ≈ −0.75),
        // where the true gradient vanishes and the finite-difference
        // quotient is all truncation noise. A wrong backward formula still
        // fails loudly (errors come out around 1e-2 or worse).
        #[test]
        fn random_small_chains_pass(
            m in 1usize..4, k in 1usize..8, n in 1usize..6, seed in 0u64..500
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = gc_vals(&mut rng, k * n);
            let x0 = gc_vals(&mut rng, m * k);
            let err = grad_check(
                |t, x| {
                    let wt = t.constant(w.clone(), vec![k, n])?;
                    let h = t.matmul(x, wt)?;
                    let h = t.gelu(h);
                    Ok(t.mean_all(h))
                },
                &x0,
                &[m, k],
                DEFAULT_GRAD_CHECK_EPS,
            ).unwrap();
            proptest::prop_assert!(err < 1e-3, "error {}", err);
        }
    }
}
