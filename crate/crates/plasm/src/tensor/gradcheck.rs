//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only ever calls the provided
//! forward closure, so it can falsify any analytic backward implementation.

use crate::error::Result;

use super::Tensor;

/// Central-difference gradient estimate of a deterministic scalar function,
/// one element at a time: (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_diff_gradient<F>(f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let base = at.data().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::new(at.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(at.shape().to_vec(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// Largest elementwise relative error between two gradients, with a floor on
/// the denominator so near-zero entries compare absolutely.
pub fn max_rel_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes disagree");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_derivative() {
        let f = |t: &Tensor| Ok(t.data()[0] * t.data()[0]);
        let at = Tensor::scalar(3.0).unwrap();
        let g = finite_diff_gradient(f, &at, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |_: &Tensor| Ok(42.0);
        let at = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = finite_diff_gradient(f, &at, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn agrees_with_backward_on_a_dense_layer() {
        use crate::tensor::tape::Tape;
        use rand::Rng;

        let mut rng = crate::rng::stream(17, &[0]);
        let x = Tensor::new(
            vec![2, 3],
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![3, 2],
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
        .with_requires_grad(true);
        let b = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();

        let analytic = {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let wid = tape.param("w", w.clone());
            let bid = tape.leaf(b.clone());
            let d = tape.dense(xid, wid, bid).unwrap();
            let s = tape.sigmoid(d);
            let loss = tape.sum(s);
            tape.backward(loss).unwrap()
        };
        let analytic = analytic.get("w").unwrap().clone();

        let numeric = finite_diff_gradient(
            |wt: &Tensor| {
                let d = crate::tensor::ops::dense(&x, wt, &b)?;
                let s = crate::tensor::ops::activation(&d, crate::tensor::Activation::Sigmoid);
                Ok(s.data().iter().sum())
            },
            &w,
            1e-5,
        )
        .unwrap();

        assert!(max_rel_error(&analytic, &numeric, 0.01) < 1e-6);
    }
}
