use super::{Graph, ParameterStore, Var};
use crate::error::Result;

/// Worst coordinate found by [`finite_difference_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Loss value at the unperturbed parameters.
    pub loss: f64,
    /// Coordinates whose relative error reached `tol`, as
    /// `(parameter, index, analytic, numeric)`.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    /// Spacing of representable central differences: one ulp of the loss
    /// divided by `2 * step`.
    pub fn quantum(&self, step: f64) -> f64 {
        self.loss.abs() * f64::EPSILON / (2.0 * step)
    }
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every parameter coordinate, returning the largest relative error.
///
/// `f` builds a fresh graph from the current store values and returns the
/// scalar loss node. Parameter values are restored afterwards.
pub fn finite_difference_check<F>(store: &mut ParameterStore, step: f64, f: F) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<(Graph, Var)>,
{
    finite_difference_report(store, step, f64::INFINITY, f).map(|r| r.max_rel_error)
}

/// [`finite_difference_check`] with the worst coordinate and every
/// coordinate whose relative error is at least `tol`.
pub fn finite_difference_report<F>(store: &mut ParameterStore, step: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<(Graph, Var)>,
{
    store.zero_grad();
    let (graph, loss) = f(store)?;
    let loss_value = graph.scalar(loss);
    graph.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|id| {
            let t = store.by_id(id);
            t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    store.zero_grad();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        parameter: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        loss: loss_value,
        failures: Vec::new(),
    };
    for (id, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.by_id(id).data()[i];
            store.by_id_mut(id).data_mut()[i] = orig + step;
            let (g, l) = f(store)?;
            let plus = g.scalar(l);
            store.by_id_mut(id).data_mut()[i] = orig - step;
            let (g, l) = f(store)?;
            let minus = g.scalar(l);
            store.by_id_mut(id).data_mut()[i] = orig;
            let n = (plus - minus) / (2.0 * step);
            let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            report.coordinates += 1;
            if err >= tol {
                report.failures.push((store.name(id).to_string(), i, a, n));
            }
            if err > report.max_rel_error || report.parameter.is_empty() {
                report.max_rel_error = err;
                report.parameter = store.name(id).to_string();
                report.index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}
