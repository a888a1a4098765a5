//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::par;
use crate::tensor::Tensor;

/// Outcome of a gradient check over one or more input tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "checked function must be scalar-valued, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)
}

/// Compares the gradients of `f` with respect to every coordinate of every
/// input against central differences `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// The perturbed evaluations are independent and run in parallel.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::Contract(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(g);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let numeric: Vec<Result<f64>> = par::map_range(coords.len(), |c| {
        let (i, j) = coords[c];
        let mut shifted = inputs.to_vec();
        let x0 = inputs[i].data()[j];
        shifted[i].data_mut()[j] = x0 + epsilon;
        let plus = evaluate(&f, &shifted)?;
        shifted[i].data_mut()[j] = x0 - epsilon;
        let minus = evaluate(&f, &shifted)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("input {i}, coordinate {j}")));
        }
        Ok((plus - minus) / (2.0 * epsilon))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: coords.len(),
    };
    for (&(i, j), num) in coords.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[i][j];
        if !ana.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient, input {i}, coordinate {j}")));
        }
        let err = (ana - num).abs() / 1f64.max(ana.abs()).max(num.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
    }
    Ok(report)
}

/// Single-input form of [`check_gradients`], returning the max relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    check_gradients(|g, v| f(g, v[0]), std::slice::from_ref(x), epsilon).map(|r| r.max_rel_error)
}
