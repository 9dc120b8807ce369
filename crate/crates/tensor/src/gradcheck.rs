//! Finite-difference verification of analytic gradients (double precision).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-element relative error over all inputs.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tolerance: f64,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Analytic gradient of the scalar built by `f` with respect to each input.
pub fn analytic_gradient<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central differences with step `step_scale * max(1, |x|)` per element.
pub fn numeric_gradient<F>(inputs: &[Tensor<f64>], f: &F, step_scale: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let h = step_scale * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            gi.push((fp - fm) / (2.0 * h));
        }
        out.push(gi);
    }
    Ok(out)
}

/// Relative error per element is `|a - n| / max(|a|, |n|, floor)` where the
/// floor is `1e-3` times the largest numerical gradient magnitude (and at
/// least `1e-12`), so entries that are zero up to rounding do not dominate.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tolerance: f64) -> GradCheckReport {
    let gmax = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * gmax).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tolerance,
        elements: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            report.elements += 1;
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, j);
                report.analytic_at_worst = av;
                report.numeric_at_worst = nv;
            }
        }
    }
    report
}

/// Compares the analytic gradient of `f` against central differences
/// (`step_scale = 1e-4`).
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let a = analytic_gradient(inputs, &f)?;
    let n = numeric_gradient(inputs, &f, 1e-4)?;
    Ok(compare_gradients(&a, &n, tolerance))
}
