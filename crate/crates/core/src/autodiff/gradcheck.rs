//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative errors so that coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CoordFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tol: f64,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.n_coords += other.n_coords;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.failures.extend(other.failures);
    }

    pub fn combine(reports: impl IntoIterator<Item = GradCheckReport>, tol: f64) -> GradCheckReport {
        let mut acc = GradCheckReport {
            n_coords: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            tol,
            failures: Vec::new(),
        };
        for r in reports {
            acc.merge(r);
        }
        acc
    }
}

/// Compares the tape gradient of scalar `f` at `point` against
/// `(f(x + εe_i) - f(x - εe_i)) / 2ε` for every coordinate.
pub fn check_gradients<'a, F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<'a>, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, tol)
}

/// [`check_gradients`] over several inputs at once.
pub fn check_gradients_multi<'a, F>(f: F, points: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<'a>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect()
    };

    let mut report = GradCheckReport {
        n_coords: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tol,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..points[input].len() {
            let orig = points[input].as_slice()[index];
            work[input].as_mut_slice()[index] = orig + eps;
            let up = eval(&work)?;
            work[input].as_mut_slice()[index] = orig - eps;
            let down = eval(&work)?;
            work[input].as_mut_slice()[index] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_slice()[index];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.n_coords += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol {
                report.failures.push(CoordFailure {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
