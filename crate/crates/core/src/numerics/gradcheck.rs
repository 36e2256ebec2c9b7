//! Central finite-difference checking of analytic gradients.

use super::tensor::Tensor;
use crate::error::Result;

/// Default perturbation for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Finite-difference estimate of `d f(inputs) / d inputs[which]`.
///
/// Only forward evaluations are used, so the estimate is independent of the
/// backward closures it is compared against.
pub fn numeric_grad<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let target = &inputs[which];
    let base = target.to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        target.set_data(&probe)?;
        let up = f(inputs)?.item();
        probe[i] = base[i] - step;
        target.set_data(&probe)?;
        let down = f(inputs)?.item();
        probe[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    target.set_data(&base)?;
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)` over whole vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Worst relative error between backward-pass gradients and finite
/// differences over all `inputs`. Inputs are cloned into fresh leaves; the
/// caller's tensors are left untouched.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    f(&leaves)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(Tensor::grad_or_zeros).collect();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let n = numeric_grad(&f, &leaves, i, step)?;
        worst = worst.max(relative_error(a, &n));
    }
    Ok(worst)
}

/// Like [`gradcheck`] but for parameters that live inside a model: `loss`
/// closes over them and `params` are perturbed in place (then restored).
pub fn gradcheck_params<F>(loss: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    params.iter().for_each(Tensor::zero_grad);
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(Tensor::grad_or_zeros).collect();
    params.iter().for_each(Tensor::zero_grad);
    let f = |_: &[Tensor]| loss();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let n = numeric_grad(&f, params, i, step)?;
        worst = worst.max(relative_error(a, &n));
    }
    Ok(worst)
}
