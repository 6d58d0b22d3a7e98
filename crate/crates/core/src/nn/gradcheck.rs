use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, 1e-12)` over all parameters.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn gradient_check<F>(
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {eps} must be > 0"
        )));
    }
    check_dim("analytic gradient length", params.len(), analytic.len())?;
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let up = loss(&probe);
        probe[i] = params[i] - eps;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at parameter {i}")));
        }
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
