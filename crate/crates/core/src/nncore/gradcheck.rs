//! Finite-difference verification of tape gradients.

use super::params::ParamRegistry;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale: the relative
/// error denominator is `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter path and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub num_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn evaluate<F>(params: &ParamRegistry, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    if tape.dropout_active() {
        return Err(Error::Nondeterministic(
            "dropout enabled during gradient check".into(),
        ));
    }
    Ok(tape.value(loss).item())
}

/// Compares analytic gradients of `f` against central differences with step
/// `h` for every scalar of every parameter.
///
/// `f` must build a scalar loss on the tape it is given and must not enable
/// dropout; stochastic functions are rejected.
pub fn grad_check<F>(params: &ParamRegistry, h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    if tape.dropout_active() {
        return Err(Error::Nondeterministic(
            "dropout enabled during gradient check".into(),
        ));
    }
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::Numeric {
            context: "grad_check".into(),
            detail: format!("loss is {base}"),
        });
    }
    if evaluate(params, &f)?.to_bits() != base.to_bits() {
        return Err(Error::Nondeterministic(
            "two evaluations with identical parameters differ".into(),
        ));
    }
    let analytic = tape.backward(loss)?;
    drop(tape);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        num_checked: 0,
        tol,
    };
    for id in params.ids() {
        let name = params.name(id).to_string();
        let n = params.tensor(id).len();
        let grad = analytic.get(id);
        for e in 0..n {
            let a = grad.map_or(0.0, |g| g[e]);
            if !a.is_finite() {
                return Err(Error::Numeric {
                    context: name,
                    detail: format!("analytic gradient at {e} is {a}"),
                });
            }
            let orig = work.tensor(id).data()[e];
            work.tensor_mut(id).data_mut()[e] = orig + h;
            let up = evaluate(&work, &f)?;
            work.tensor_mut(id).data_mut()[e] = orig - h;
            let down = evaluate(&work, &f)?;
            work.tensor_mut(id).data_mut()[e] = orig;
            let num = (up - down) / (2.0 * h);
            if !num.is_finite() {
                return Err(Error::Numeric {
                    context: name,
                    detail: format!("finite difference at {e} is {num}"),
                });
            }
            let abs = (a - num).abs();
            let rel = abs / a.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), e));
            }
            report.num_checked += 1;
        }
    }
    Ok(report)
}
