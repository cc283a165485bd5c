//! Central finite-difference check of analytic gradients (64-bit).

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error with a unit floor: `|a - n| / max(|a|, |n|, 1)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the analytic gradient of a scalar function of several inputs
/// with `(f(x+h) - f(x-h)) / 2h` for every coordinate and returns the
/// largest relative error.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h)
}
