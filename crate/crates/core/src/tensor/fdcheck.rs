//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Compare reverse-mode gradients of `build`'s scalar output against
/// central finite differences over every element of `input`.
///
/// Returns the worst relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<F>(build: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Contract(format!("finite difference step must be positive, got {step}")));
    }

    let mut g = Graph::new();
    let x = g.parameter(input.clone());
    let loss = build(&mut g, x);
    let base = g.value(loss);
    assert!(base.is_scalar(), "finite_difference_check requires a scalar function");
    if !base.item().is_finite() {
        return Err(Error::Numeric(format!("function value is not finite: {}", base.item())));
    }
    g.backward(loss);
    let analytic = g
        .grad(x)
        .expect("input participates in differentiation")
        .to_vec();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let loss = build(&mut g, x);
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value is not finite: {v}")));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let fp = eval(&plus)?;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let fm = eval(&minus)?;
        let numeric = (fp - fm) / (2.0 * step);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn linear_function_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor([1, 2, 3, 3], &mut rng);
        let err = finite_difference_check(|g, v| g.sum_all(v), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "linear fd error {err}");
    }

    #[test]
    fn conv_relu_pool_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor([1, 2, 6, 6], &mut rng);
        let k = random_tensor([3, 2, 3, 3], &mut rng);
        let err = finite_difference_check(
            move |g, v| {
                let kv = g.constant(k.clone());
                let bv = g.constant(Tensor::zeros([1, 3, 1, 1]));
                let c = g.conv2d(v, kv, bv, 1, 1);
                let r = g.relu(c);
                let p = g.max_pool2(r);
                g.sum_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "conv/relu/pool fd error {err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (c, h, w) = (3, 4, 4);
        let x = random_tensor([1, c, h, w], &mut rng);
        let mut labels = Tensor::zeros([1, c, h, w]);
        for y in 0..h {
            for xx in 0..w {
                labels.set(0, rng.random_range(0..c), y, xx, 1.0);
            }
        }
        let err = finite_difference_check(
            move |g, v| {
                let probs = g.softmax_channels(v);
                let lv = g.constant(labels.clone());
                let wv = g.constant(Tensor::filled([1, 1, h, w], 1.0));
                g.weighted_cross_entropy(probs, lv, wv).unwrap()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "softmax+ce fd error {err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|g, v| g.sum_all(v), &x, 0.0).is_err());
    }

    #[test]
    fn reports_non_finite_function_values() {
        // Squaring 1e200 overflows to infinity.
        let x = Tensor::scalar(1e200);
        let err = finite_difference_check(|g, v| g.sum_squares(v), &x, 1e-5).unwrap_err();
        assert!(matches!(err, crate::error::Error::Numeric(_)));
    }
}
