//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst componentwise relative error between analytic and finite-difference
/// gradients of a scalar function of one tensor.
///
/// The numeric derivative is the Richardson extrapolation of central
/// differences at `step` and `step / 2`, which cancels the `step²` term and
/// lets a larger step keep roundoff small. The relative error of a component
/// is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

/// Same as [`grad_check`] for a function of several tensors; every input is
/// perturbed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, points)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        for j in 0..point.numel() {
            let x0 = point.data()[j];
            let mut central = |h: f64| -> Result<f64> {
                probe[ti].data_mut()[j] = x0 + h;
                let fp = eval(&f, &probe)?;
                probe[ti].data_mut()[j] = x0 - h;
                let fm = eval(&f, &probe)?;
                probe[ti].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let coarse = central(step)?;
            let fine = central(step / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[ti][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    Ok(v[0])
}

fn analytic_grads<F>(f: &F, points: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|t| g.input(&t.clone().requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    if !g.value(out)[0].is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(points)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}
