//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is used to verify.

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// `|a − n| / max(1e-4, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-4f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

/// Which elements of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many evenly strided elements per input tensor.
    Strided(usize),
}

fn eval<T: Real, F>(inputs: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.scalar_f64(loss))
}

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences of step `step`, element by element.
pub fn check_gradients<T: Real, F>(
    inputs: &[Tensor<T>],
    step: f64,
    coverage: Coverage,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(NumericsError::NonScalarLoss(g.value(loss).shape().to_vec()));
    }
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = vec![T::zero(); input.len()];
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let stride = match coverage {
            Coverage::All => 1,
            Coverage::Strided(k) => input.len().div_ceil(k.max(1)).max(1),
        };
        for e in (0..input.len()).step_by(stride) {
            let x = input.data()[e];
            let (xp, xm) = (x + T::of(step), x - T::of(step));
            work[i].data_mut()[e] = xp;
            let lp = eval(&work, &f)?;
            work[i].data_mut()[e] = xm;
            let lm = eval(&work, &f)?;
            work[i].data_mut()[e] = x;
            let numeric = (lp - lm) / (xp.as_f64() - xm.as_f64());
            let a = analytic[e].as_f64();
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
