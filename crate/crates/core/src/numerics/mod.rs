//! Dense `f64` tensors, a small reverse-mode differentiation tape and the
//! stable reductions every loss in the crate is built from.

mod graph;
mod params;
mod tensor;

pub use graph::{BoundParams, Gradients, Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

pub(crate) use graph::{lse, softmax_row, sq_dist};

use crate::error::{Error, Result};

/// `max(v) + ln sum exp(v_i - max(v))` over a rank-1 tensor.
pub fn logsumexp(v: &Tensor) -> Result<f64> {
    logsumexp_slice(v.values())
}

pub fn logsumexp_slice(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(lse(v))
}

pub fn softmax(v: &Tensor) -> Tensor {
    Tensor::vector(softmax_row(v.values()))
}

/// Records the loss on a fresh graph and adds its gradients into `params`.
pub fn backward<F>(params: &mut ParamSet, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = build(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    grads.accumulate_into(&bound, params)?;
    Ok(g.scalar(loss))
}

/// `param <- param - lr * grad` for every parameter, then zeroes the gradients.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidLearningRate(lr));
    }
    params.step_raw(lr);
    Ok(())
}

/// Rescales the accumulated gradients so their joint norm is at most
/// `max_norm`; returns the norm before rescaling.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm.is_finite() {
        params.scale_grads(max_norm / norm);
    }
    norm
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// `(name, relative error)` for every parameter tensor.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h`.
///
/// The relative error of a parameter tensor is
/// `||analytic - numeric|| / (||analytic|| + 1e-12)`; the report's maximum is
/// taken over parameter tensors. `loss_fn` must be deterministic.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &ParamSet, h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = loss_fn(&mut g, &bound)?;
    let grads = g.backward(loss)?;

    let mut eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let l = loss_fn(&mut g, &b)?;
        Ok(g.scalar(l))
    };

    let mut per_param = Vec::new();
    let mut work = params.clone();
    for (name, var) in bound.iter() {
        let n = params.get(name).map(Tensor::len).unwrap_or(0);
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[n]));
        let mut diff2 = 0.0;
        for i in 0..n {
            let orig = params.get(name).expect("bound param").values()[i];
            work.get_mut(name).expect("bound param").values_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name).expect("bound param").values_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name).expect("bound param").values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let d = analytic.values()[i] - numeric;
            diff2 += d * d;
        }
        let rel = diff2.sqrt() / (analytic.norm() + 1e-12);
        per_param.push((name.clone(), rel));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_param,
    })
}
