//! Central-difference gradient estimates, used as the oracle against
//! which [`crate::autodiff`] is checked.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Estimates `∂f/∂θ_i ≈ (f(θ + δe_i) − f(θ − δe_i)) / 2δ` for every coordinate.
pub fn finite_diff<F>(f: F, theta: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    let est = finite_diff_at(f, theta, &coords, step)?;
    Tensor::new(theta.shape(), est)
}

/// Same estimate restricted to `coords` (flat indices into `theta`).
pub fn finite_diff_at<F>(mut f: F, theta: &Tensor, coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= theta.numel() {
            return Err(Error::Contract(format!(
                "coordinate {i} out of range for {} values",
                theta.numel()
            )));
        }
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while probing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let g = finite_diff(|t| Ok(t.data()[0] * t.data()[0]), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_gives_zeros() {
        let g = finite_diff(|_| Ok(4.2), &Tensor::ones([3, 2]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(), &[3, 2]);
    }

    #[test]
    fn quadratic_form_matches_analytic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let a = Tensor::randn([n, n], 1.0, &mut rng);
        let theta = Tensor::randn([n], 1.0, &mut rng);
        let quad = |t: &Tensor| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += t.data()[i] * a.data()[i * n + j] * t.data()[j];
                }
            }
            Ok(s)
        };
        let g = finite_diff(quad, &theta, 1e-5).unwrap();
        for i in 0..n {
            let expected: f64 = (0..n)
                .map(|j| (a.data()[i * n + j] + a.data()[j * n + i]) * theta.data()[j])
                .sum();
            assert!((g.data()[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let err = finite_diff(|_| Ok(f64::NAN), &Tensor::ones([1]), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(finite_diff(|_| Ok(0.0), &Tensor::ones([1]), 0.0).is_err());
    }
}
