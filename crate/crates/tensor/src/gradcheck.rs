//! Central finite-difference checks of analytic gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare gradients of the scalar `loss(inputs)` with central differences.
///
/// `samples` lists `(input, element)` pairs to perturb; every input is
/// registered as a trainable leaf.
pub fn check<F>(loss: F, inputs: &[Tensor], samples: &[(usize, usize)], step: f64, floor: f64) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = tensors.iter().map(|t| g.param(t.clone())).collect();
        loss(&g, &vars).item()
    };
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = loss(&g, &vars);
        let grads = g.backward(out);
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(input, index) in samples {
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + step;
        let plus = eval(&work);
        work[input].data_mut()[index] = orig - step;
        let minus = eval(&work);
        work[input].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[input].data()[index];
        let rel_err = relative_error(a, numeric, floor);
        report.checked += 1;
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if report.worst.as_ref().map_or(true, |w| rel_err >= w.rel_err) {
                report.worst = Some(Mismatch { input, index, analytic: a, numeric, rel_err });
            }
        }
    }
    report
}

/// Every element of every input.
pub fn all_samples(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect()
}
