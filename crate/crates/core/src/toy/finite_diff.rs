use crate::error::{NaeError, Result};

/// Central-difference gradient `(f(x + h·e_i) - f(x - h·e_i)) / 2h`, coordinate by coordinate.
pub fn finite_difference_gradient<F>(mut objective: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(NaeError::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = objective(&x)?;
        x[i] = point[i] - step;
        let down = objective(&x)?;
        x[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NaeError::NumericalDivergence(format!("objective not finite near coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
