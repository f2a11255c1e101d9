//! Central-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract_err, domain_err, Result};

/// Outcome of a full gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate that attained `max_rel_err`.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, eps, &coords).map(|r| r.max_rel_err)
}

/// Same check restricted to a subset of coordinates.
pub fn grad_check_coords<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(domain_err!("eps {} outside [1e-7, 1e-3]", eps));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let y = f(&tape, x)?;
        if y.value().len() != 1 {
            return Err(contract_err!(
                "grad_check needs a scalar function, got shape {:?}",
                y.shape()
            ));
        }
        tape.backward(y)?.wrt(x)
    };
    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p);
        f(&tape, x)?.value().item()
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        if i >= point.len() {
            return Err(contract_err!("coordinate {} out of range", i));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_err || (i == coords[0] && err == 0.0) {
            report = GradCheckReport {
                max_rel_err: err,
                worst: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
