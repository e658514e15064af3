use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared on an absolute scale, so
/// finite-difference noise on near-zero components does not dominate.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait GradCheckable {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    fn analytic_grad(&self) -> Result<Vec<f64>>;
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients with central finite differences at step `eps`
/// and returns the largest relative error over all parameters.
pub fn grad_check(op: &mut dyn GradCheckable, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!("eps must be > 0, got {eps}")));
    }
    let analytic = op.analytic_grad()?;
    if analytic.len() != op.num_params() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            op.num_params()
        )));
    }
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = op.param(i);
        op.set_param(i, orig + eps);
        let plus = op.loss()?;
        op.set_param(i, orig - eps);
        let minus = op.loss()?;
        op.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
