//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it verifies.

use super::{Parameters, Tape, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// (parameter name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is ~0 are judged on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward gradients of `loss` against central differences with
/// step `eps` on every coordinate of every parameter that requires a gradient.
pub fn check<M, F>(module: &mut M, loss: F, eps: f64, floor: f64) -> Result<GradCheckReport>
where
    M: Parameters<f64>,
    F: Fn(&M, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(module, &mut tape)?;
    let mut grads = tape.backward(l)?;
    let analytic: Vec<(String, Option<Vec<f64>>)> = module
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let g = if t.requires_grad() { grads.take(t) } else { None };
            (name, g)
        })
        .collect();

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(m, &mut tape)?;
        Ok(tape.value(l)[0])
    };

    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (pi, (name, g)) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        for (j, &a) in g.iter().enumerate() {
            let orig = module.named_params()[pi].1.data()[j];
            module.named_params_mut()[pi].1.data_mut()[j] = orig + eps;
            let plus = eval(module)?;
            module.named_params_mut()[pi].1.data_mut()[j] = orig - eps;
            let minus = eval(module)?;
            module.named_params_mut()[pi].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_err(a, numeric, floor);
            report.coordinates += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e.max(report.max_rel_err);
                report.worst = Some((name.clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// A bag of loose named tensors, handy for checking single ops.
#[derive(Debug, Default, Clone)]
pub struct TensorBag(pub Vec<(String, super::Tensor<f64>)>);

impl Parameters<f64> for TensorBag {
    fn named_params(&self) -> Vec<(String, &super::Tensor<f64>)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut super::Tensor<f64>)> {
        self.0.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}
