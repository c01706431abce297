use crate::error::{EconError, Result};

/// Central-difference derivative of a scalar function.
pub fn finite_diff_derivative<F>(f: F, x: f64, step: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let up = f(x + step);
    let down = f(x - step);
    if !(up.is_finite() && down.is_finite()) {
        return Err(EconError::NonFiniteEvaluation(format!("function not finite within {step} of {x}")));
    }
    Ok((up - down) / (2.0 * step))
}

/// Central-difference gradient; error is O(step^2) for smooth functions.
pub fn finite_diff_gradient<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(EconError::NonFiniteEvaluation(format!("function not finite along axis {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
