//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::nn::tensor::ParamTree;

/// Entries whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Path and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `loss` against central finite
/// differences with step `eps`, entry by entry.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(loss: F, params: &ParamTree<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamTree<f64>) -> Result<(f64, ParamTree<f64>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let paths: Vec<String> = params.paths().cloned().collect();
    for path in paths {
        let grad = analytic.get(&path)?.clone();
        let n = params.get(&path)?.len();
        for i in 0..n {
            let orig = params.get(&path)?.data()[i];
            probe.get_mut(&path)?.data_mut()[i] = orig + eps;
            let (up, _) = loss(&probe)?;
            probe.get_mut(&path)?.data_mut()[i] = orig - eps;
            let (down, _) = loss(&probe)?;
            probe.get_mut(&path)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("{path}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((path.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
