//! Central finite-difference verification of tape gradients.

use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a unit floor on the denominator, so that vanishing
/// gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `f` at `x` on every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, &all, step, tol)
}

/// Checks `f` at `x` on the listed coordinates only.
pub fn grad_check_at<F>(
    f: F,
    x: &Tensor,
    probes: &[usize],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let root = f(&tape, xv)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(xv);

    let eval = |t: &Tensor| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let v = tape.var(t.clone());
        Ok(f(&tape, v)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        probes: probes.len(),
        tolerance: tol,
        passed: true,
    };
    let mut probe = x.clone();
    for &i in probes {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
