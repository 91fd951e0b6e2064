//! Central finite-difference oracle for gradient tests.
//!
//! Works purely through forward evaluation, so it stays independent of the
//! backward kernels it is used to check.

use crate::{Graph, Result, Tensor, Var};

/// Step used for central differences.
pub const STEP: f64 = 1e-3;

/// Denominator floor for the relative error, so components that are zero
/// analytically are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x0 + h) - f(x0 - h)) / 2h`.
pub fn central_difference(x0: f64, h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evenly spaced element indices, at most `max` of them.
pub fn sample_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        (0..max).map(|k| k * numel / max).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences for every input tensor (up to `max_per_input` elements each).
pub fn check<F>(inputs: &[Tensor<f64>], max_per_input: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().requires_grad())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in sample_indices(t.numel(), max_per_input) {
            let x0 = t.data()[j];
            let mut err = None;
            let numeric = central_difference(x0, STEP, |x| {
                work[i].data_mut()[j] = x;
                eval(&work).unwrap_or_else(|e| {
                    err = Some(e);
                    f64::NAN
                })
            });
            work[i].data_mut()[j] = x0;
            if let Some(e) = err {
                return Err(e);
            }
            report.record(i, j, analytic[i][j], numeric);
        }
    }
    Ok(report)
}
