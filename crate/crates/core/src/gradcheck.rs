//! Central finite-difference verification of reverse-mode gradients.
//!
//! The error for one coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`:
//! relative for large gradients, absolute for small ones. Coordinates whose
//! perturbation crosses a ReLU kink are skipped and counted separately.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// A scalar function of several tensors with an analytic gradient.
pub trait Differentiable {
    /// Value plus a signature identifying the smooth piece the point lies on.
    fn evaluate(&self, inputs: &[Tensor]) -> Result<(f64, u64)>;
    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Adapts a graph-building closure into a [`Differentiable`].
pub struct GraphFn<F>(pub F);

impl<F> GraphFn<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn build(&self, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.0)(&mut g, &vars)?;
        let out = if g.value(out).len() == 1 { out } else { g.sum(out)? };
        Ok((g, vars, out))
    }
}

impl<F> Differentiable for GraphFn<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn evaluate(&self, inputs: &[Tensor]) -> Result<(f64, u64)> {
        let (g, _, out) = self.build(inputs)?;
        Ok((g.value(out).data()[0], g.kink_signature()))
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let (g, vars, out) = self.build(inputs)?;
        let grads = g.backward(out)?;
        Ok(vars.iter().map(|&v| grads.get_or_zeros(v)).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Cap on coordinates checked per input tensor (evenly strided); `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(message: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            worst: None,
            checked: 0,
            skipped_nonsmooth: 0,
            passed: false,
            failure: Some(message),
        }
    }
}

pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_objective(&GraphFn(f), inputs, opts)
}

pub fn grad_check_objective(
    f: &dyn Differentiable,
    inputs: &[Tensor],
    opts: GradCheckOptions,
) -> GradCheckReport {
    for (i, t) in inputs.iter().enumerate() {
        if let Some(j) = t.first_non_finite() {
            return GradCheckReport::failed(format!("non-finite input {i} at element {j}"));
        }
    }
    let base = match f.evaluate(inputs) {
        Ok((_, sig)) => sig,
        Err(e) => return GradCheckReport::failed(format!("forward failed: {e}")),
    };
    let analytic = match f.gradient(inputs) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(format!("backward failed: {e}")),
    };
    for (i, g) in analytic.iter().enumerate() {
        if let Some(j) = g.first_non_finite() {
            return GradCheckReport::failed(format!("non-finite gradient for input {i} at element {j}"));
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_nonsmooth: 0,
        passed: true,
        failure: None,
    };
    let mut work = inputs.to_vec();
    for ti in 0..inputs.len() {
        let n = inputs[ti].len();
        let step = match opts.max_coords {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + opts.h;
            let plus = f.evaluate(&work);
            work[ti].data_mut()[j] = orig - opts.h;
            let minus = f.evaluate(&work);
            work[ti].data_mut()[j] = orig;
            let ((fp, sp), (fm, sm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.passed = false;
                    report.failure = Some(format!("forward failed at input {ti}, element {j}: {e}"));
                    return report;
                }
            };
            if sp != base || sm != base {
                report.skipped_nonsmooth += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[ti].data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, j));
            }
        }
    }
    if report.checked == 0 {
        report.passed = false;
        report.failure = Some("no smooth coordinates to check".into());
    } else if report.skipped_nonsmooth > report.checked {
        report.passed = false;
        report.failure = Some(format!(
            "{} of {} coordinates straddle kinks",
            report.skipped_nonsmooth,
            report.checked + report.skipped_nonsmooth
        ));
    } else if report.max_rel_error >= opts.tol {
        report.passed = false;
        report.failure = Some(format!(
            "max relative error {:.3e} at {:?} exceeds {:.1e}",
            report.max_rel_error, report.worst, opts.tol
        ));
    }
    report
}
