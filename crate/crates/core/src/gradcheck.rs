//! Central finite-difference gradient checking.
//!
//! The numeric side re-evaluates the expression from scratch on a fresh tape
//! for every perturbation and never touches the backward pass.

use crate::diffcore::{DiffValue, Matrix, Tape};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7 }
    }
}

/// How an input is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturb {
    /// One entry at a time.
    Entry,
    /// `(i, j)` and `(j, i)` together; the analytic side is `g_ij + g_ji`.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_error: f64,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Scaled mismatch: 0 when within the absolute floor, else relative error.
pub fn entry_error(analytic: f64, numeric: f64, tol: Tolerance) -> f64 {
    let diff = (analytic - numeric).abs();
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    if diff <= tol.abs {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

pub fn check_gradients<F>(inputs: &[Matrix], perturb: &[Perturb], h: f64, tol: Tolerance, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[DiffValue]) -> Result<DiffValue>,
{
    let mut tape = Tape::new();
    let leaves: Vec<DiffValue> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    tape.backward(root)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&l| tape.grad(l)).collect();

    let eval = |vals: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<DiffValue> = vals.iter().map(|m| t.leaf(m.clone())).collect();
        let r = f(&mut t, &ls)?;
        Ok(t.scalar(r))
    };

    let mut report = GradReport {
        checked: 0,
        max_error: 0.0,
        failures: 0,
    };
    let mut vals = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mode = perturb.get(idx).copied().unwrap_or(Perturb::Entry);
        for c in 0..input.ncols() {
            for r in 0..input.nrows() {
                if mode == Perturb::Symmetric && r > c {
                    continue;
                }
                let bump = |vals: &mut Vec<Matrix>, d: f64| {
                    vals[idx][(r, c)] = input[(r, c)] + d;
                    if mode == Perturb::Symmetric && r != c {
                        vals[idx][(c, r)] = input[(c, r)] + d;
                    }
                };
                bump(&mut vals, h);
                let plus = eval(&vals)?;
                bump(&mut vals, -h);
                let minus = eval(&vals)?;
                bump(&mut vals, 0.0);
                let numeric = (plus - minus) / (2.0 * h);
                let a = &analytic[idx];
                let an = if mode == Perturb::Symmetric && r != c {
                    a[(r, c)] + a[(c, r)]
                } else {
                    a[(r, c)]
                };
                let err = entry_error(an, numeric, tol);
                report.checked += 1;
                report.max_error = report.max_error.max(err);
                if err > tol.rel {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
