//! Central finite differences, the independent oracle every analytic
//! backward pass in this crate is checked against. Always runs in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-element central difference (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps).
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Input("finite_diff_grad: eps must be > 0".into()));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad: non-finite objective at element {i}"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: max |a - b| / max(1, ||a||_inf, ||b||_inf).
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let denom = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(1.0f64, |m, &v| m.max(v.abs()));
    analytic.max_abs_diff(numeric) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::matmul;

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.1]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-4).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form_matches_analytic() {
        // f(x) = x^T A x with symmetric A has gradient 2 A x.
        let mut rng = Rng::new(3);
        let n = 4;
        let mut a = Tensor::<f64>::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.uniform_f64() - 0.5;
                a.set(&[i, j], v);
                a.set(&[j, i], v);
            }
        }
        let x = Tensor::from_vec(&[n, 1], (0..n).map(|_| rng.uniform_f64()).collect()).unwrap();
        let f = |t: &Tensor<f64>| {
            let ax = matmul(&a, t)?;
            Ok(t.data().iter().zip(ax.data()).map(|(u, v)| u * v).sum())
        };
        let numeric = finite_diff_grad(f, &x, 1e-5).unwrap();
        let analytic = matmul(&a, &x).unwrap().scale(2.0);
        assert!(relative_error(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
