use super::Tensor;

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("shape preserved")
}

/// Largest element-wise relative error `|a-b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries that are both near zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic() {
        let g = finite_diff_gradient(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_gradient(|_| 4.2, &x, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_cross_entropy_matches_analytic() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7]).into_param();
        let loss = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let l = tape.softmax_cross_entropy(v, &[2]).unwrap();
            tape.scalar(l)
        };
        let numeric = finite_diff_gradient(loss, &x, 1e-5);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let l = tape.softmax_cross_entropy(v, &[2]).unwrap();
        let g = tape.backward(l).unwrap();
        let err = max_relative_error(g.get(v).unwrap(), numeric.data(), 1e-8);
        assert!(err < 1e-6, "relative error {err}");
    }
}
