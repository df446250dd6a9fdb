//! Central finite-difference gradient checks.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares analytic and numerical gradients of `f` with respect to each input.
///
/// `f` builds a scalar-valued graph from the given input vars. The relative
/// error uses `max(|a|, |n|, floor)` as denominator so that near-zero
/// entries are judged on absolute scale.
pub fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var, eps: f64, floor: f64) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let o = f(&mut g, &vs);
        g.value(o).item()
    };
    let mut res = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0 };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += eps;
            let fp = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * eps;
            let fm = eval(&xs);
            let num = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let abs = (a - num).abs();
            let rel = abs / a.abs().max(num.abs()).max(floor);
            res.max_abs_err = res.max_abs_err.max(abs);
            res.max_rel_err = res.max_rel_err.max(rel);
        }
    }
    res
}
