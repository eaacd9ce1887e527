//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Analytic and numeric gradients for every input of a checked function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .flat_map(|(a, n)| a.iter().zip(n))
            .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// Checks the gradient of a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let report = finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error())
}

/// Checks the gradient of a scalar function of several tensors.
///
/// Every input is differentiated; `f` must return a scalar.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x)).collect();
        let out = f(&tape, &vars).map_err(to_evaluation)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got {} values",
                v.len()
            )));
        }
        if !v[0].is_finite() {
            return Err(Error::Evaluation("function value is not finite".into()));
        }
        Ok(v[0])
    };
    eval(inputs)?;

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
            .collect();
        let out = f(&tape, &vars).map_err(to_evaluation)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; x.numel()])
            })
            .collect()
    };

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].values()[j];
            work[i].values_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(GradCheckReport { analytic, numeric })
}

fn to_evaluation(e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Evaluation(format!("non-finite value from {op}")),
        other => other,
    }
}
