use crate::error::{EconError, Result};

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub point: Vec<f64>,
    pub iterations: usize,
    /// `max_i |x_i - map(x)_i|` at the returned point.
    pub residual: f64,
}

/// Damped fixed-point iteration `x <- (1-d) x + d map(x)`.
///
/// Stops as soon as the undamped residual `|x - map(x)|_inf` falls below
/// `tol`; the identity map therefore returns the start after one
/// evaluation. `map` may fail, which aborts the iteration.
pub fn fixed_point_iterate<F>(
    mut map: F,
    start: &[f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = start.to_vec();
    let mut best = (f64::INFINITY, x.clone());
    for iter in 1..=max_iter {
        let mapped = map(&x)?;
        if mapped.len() != x.len() || mapped.iter().any(|v| !v.is_finite()) {
            return Err(EconError::NonFiniteEvaluation(
                "fixed-point map returned a non-finite or mis-sized value".into(),
            ));
        }
        let residual = x.iter().zip(&mapped).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if residual < best.0 {
            best = (residual, x.clone());
        }
        if residual < tol {
            return Ok(FixedPointResult { point: x, iterations: iter, residual });
        }
        for (xi, mi) in x.iter_mut().zip(&mapped) {
            *xi = (1.0 - damping) * *xi + damping * mi;
        }
    }
    Err(EconError::NoConvergence { iterations: max_iter, max_residual: best.0, residuals: vec![best.0], best: best.1 })
}
