//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Maximum relative error accepted by [`grad_check`].
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Per-coordinate comparison of tape and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    let value = tape.value_ref(out);
    if value.len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Checks every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Checks only the listed coordinates; used for large parameter vectors.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let analytic_full = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&tape, v)?;
        if tape.value_ref(out).len() != 1 {
            return Err(Error::invalid(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let mut grads = tape.backward(out)?;
        grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        analytic.push(analytic_full.data()[i]);
        numeric.push((up - down) / (2.0 * eps));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Coordinates several orders below the largest gradient are dominated by
    // finite-difference round-off; judge them relative to a floor.
    let floor = (scale * 1e-3).max(1e-8);
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .collect();
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        coords: coords.to_vec(),
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        passed: max_rel_error < GRAD_CHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let r = grad_check(|t, v| Ok(t.sum_sq(v)), &x, 1e-5).unwrap();
        assert!(r.passed);
        assert!((r.analytic[0] - 2.0).abs() < 1e-12);
        assert!((r.analytic[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(|t, v| Ok(t.square(v)), &x, 1e-5).is_err());
    }

    #[test]
    fn wrong_gradient_fails() {
        // A fused op that lies about its gradient must be caught.
        let x = Tensor::from_vec(vec![0.5, -1.5]);
        let r = grad_check(
            |t, v| {
                let val = t.value(v).sq_norm();
                let wrong = t.value(v).scale(3.0);
                t.fused_scalar(&[v], val, vec![wrong])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
