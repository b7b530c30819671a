use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central differences with step `eps`.
///
/// The relative error of one coordinate is `|a - b| / max(|a|, |b|, 1e-8)`.
/// Callers must keep `x` away from kinks of `f`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let analytic = tape.backward(y)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(probe);
        f(&tape, v)?.value().item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::invalid(format!("grad_check: non-finite gradient at {i}")));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Outcome of [`grad_check_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the coordinates that were kept.
    pub max_rel_error: f64,
    /// Coordinates excluded because a difference straddled a kink.
    pub kinks: Vec<usize>,
    pub checked: usize,
}

/// Central-difference check that tolerates kinks inside the step.
///
/// A coordinate whose error exceeds `tol` is differenced again with step
/// `eps / 10`. A wrong adjoint gives two estimates that agree with each other
/// and not with the tape; a ReLU or max kink within the step moves the
/// estimate. Coordinates whose two estimates disagree by more than a tenth of
/// their error against the tape are reported as kinks and left out of
/// `max_rel_error`.
pub fn grad_check_report<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let analytic = tape.backward(y)?.wrt(xv);

    let mut probe = x.clone();
    let mut diff = |i: usize, h: f64| -> Result<f64> {
        let orig = probe.data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            probe.data_mut()[i] = v;
            let tape = Tape::new();
            let out = f(&tape, tape.constant(probe.clone()))?.value().item();
            out
        };
        let up = eval(orig + h)?;
        let down = eval(orig - h)?;
        probe.data_mut()[i] = orig;
        let d = (up - down) / (2.0 * h);
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::invalid(format!("grad_check: non-finite gradient at {i}")))
        }
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        kinks: Vec::new(),
        checked: x.len(),
    };
    for i in 0..x.len() {
        let a = analytic.data()[i];
        let coarse = diff(i, eps)?;
        let err = rel(a, coarse);
        if err > tol {
            let fine = diff(i, eps / 10.0)?;
            if rel(coarse, fine) > 0.1 * err {
                report.kinks.push(i);
                continue;
            }
        }
        report.max_rel_error = report.max_rel_error.max(err);
    }
    Ok(report)
}
