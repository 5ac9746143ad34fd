//! Central finite-difference checks against the analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
        }
    }
}

/// Relative error with a floor so that entries whose true gradient is
/// essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const DEFAULT_STEP: f64 = 3e-5;

/// Five-point central difference `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`,
/// with truncation error of order `h⁴`. `at(δ)` evaluates `f` at `x + δ`.
pub fn central_difference(mut at: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let (m2, m1) = (at(-2.0 * step)?, at(-step)?);
    let (p1, p2) = (at(step)?, at(2.0 * step)?);
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step))
}
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Checks `d f / d inputs` where `f` builds a scalar from leaves created for
/// each input tensor. `f` is re-run on a fresh graph for every perturbation.
///
/// The floor is scaled by `max(1, |f|)` since the difference quotient of a
/// large function cannot resolve gradients below that level.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let (analytic, floor): (Vec<Tensor>, f64) = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let scale = g.value(loss).item().abs().max(1.0);
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|v| g.grad(*v).unwrap_or_else(|| Tensor::zeros(&g.shape(*v))))
            .collect();
        (grads, floor * scale)
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let v = g.value(loss).item();
        Ok(v)
    };

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            let numeric = central_difference(
                |d| {
                    work[k].data_mut()[i] = orig + d;
                    eval(&work)
                },
                step,
            )?;
            work[k].data_mut()[i] = orig;
            let a = analytic[k].data()[i];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a model built on a [`ParamStore`].
///
/// At most `per_param` evenly spaced entries of each parameter are
/// perturbed, keeping the check affordable on full blocks. The floor is
/// scaled as in [`check_gradients`].
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    per_param: usize,
    step: f64,
    floor: f64,
) -> Result<GradCheck>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let (analytic, floor) = {
        let g = Graph::with_params(store);
        let loss = f(&g)?;
        let scale = g.value(loss).item().abs().max(1.0);
        g.backward(loss)?;
        (g.param_grads(), floor * scale)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::with_params(s);
        let loss = f(&g)?;
        let v = g.value(loss).item();
        Ok(v)
    };

    let mut report = GradCheck::default();
    let mut work = store.clone();
    for id in store.ids() {
        let len = store.get(id).len();
        let grad = analytic.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g);
        let stride = (len / per_param.max(1)).max(1);
        for i in (0..len).step_by(stride).take(per_param) {
            let orig = store.get(id).data()[i];
            let numeric = central_difference(
                |d| {
                    work.get_mut(id).data_mut()[i] = orig + d;
                    eval(&work)
                },
                step,
            )?;
            work.get_mut(id).data_mut()[i] = orig;
            let a = grad.map_or(0.0, |g| g.data()[i]);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // f = sum(x ⊙ x) but evaluated through a detached copy on one side
        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let honest = check_gradients(
            std::slice::from_ref(&x),
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(honest.passes(1e-6));

        let broken = check_gradients(
            &[x],
            |g, v| {
                let d = g.detach(v[0]);
                let sq = g.mul(v[0], d)?;
                Ok(g.sum(sq))
            },
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(!broken.passes(1e-2));
    }
}
