use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Compare reverse-mode gradients of a scalar-valued tensor function against
/// central finite differences. Returns the max over coordinates of
/// `|a - b| / max(|a|, |b|, 1e-8)`.
///
/// Only meaningful at `f64`; at `f32` the difference quotient drowns in
/// rounding error.
pub fn finite_diff_check<B>(f: &B, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(point.clone(), false);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
