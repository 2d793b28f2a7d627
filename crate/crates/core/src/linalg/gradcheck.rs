use crate::error::{IbitError, Result};
use crate::linalg::matrix::Matrix;

/// Entries smaller than this are compared absolutely in [`max_relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `at`.
pub fn finite_diff_grad<F>(f: F, at: &Matrix, eps: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(IbitError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut x = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + eps;
        let plus = f(&x)?;
        x.as_mut_slice()[i] = orig - eps;
        let minus = f(&x)?;
        x.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(IbitError::NonFinite(format!("objective at perturbed entry {i}")));
        }
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `max |a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)` over all entries.
pub fn max_relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_relative_error shape mismatch");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Matrix::from_fn(3, 2, |r, c| (r as f64) - (c as f64) * 0.5);
        let g = finite_diff_grad(|m| Ok(m.sum()), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&Matrix::ones(3, 2)) < 1e-9);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity_map() {
        let x = Matrix::from_fn(2, 3, |r, c| 0.3 * r as f64 - 0.7 * c as f64 + 0.1);
        let g = finite_diff_grad(|m| Ok(0.5 * m.frobenius_norm().powi(2)), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn factor_mse_gradient_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::random_normal(3, 6, 0.5, &mut rng);
        let b = Matrix::random_normal(3, 6, 0.5, &mut rng);
        let target = Matrix::random_normal(6, 6, 0.5, &mut rng);
        let mut t = Tape::new();
        let pa = t.param(a.clone());
        let pb = t.constant(b.clone());
        let prod = t.matmul_tn(pa, pb).unwrap();
        let loss = t.mse(prod, &target).unwrap();
        let tape_grad = t.backward(loss).unwrap().get(pa).unwrap().clone();
        let fd = finite_diff_grad(|m| m.matmul_tn(&b)?.mse(&target), &a, 1e-5).unwrap();
        assert!(max_relative_error(&tape_grad, &fd) <= 1e-5);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Matrix::ones(1, 1);
        assert!(finite_diff_grad(|m| Ok(if m.get(0, 0) > 1.0 { f64::NAN } else { 0.0 }), &x, 1e-5).is_err());
        assert!(finite_diff_grad(|m| Ok(m.sum()), &x, 0.0).is_err());
    }
}
