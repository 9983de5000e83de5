//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle always evaluates in 64-bit, regardless of the precision the
//! production path trains in, so that a failed check points at a wrong
//! backward rule rather than accumulated roundoff.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Gradients, Tape, Tensor, TensorError};

/// Errors from the checked function are boxed so the oracle can wrap any
/// loss, not just raw tensor expressions.
pub type EvalError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("evaluation failed: {0}")]
    Eval(#[source] EvalError),
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("analytic gradients missing parameter {0:?}")]
    MissingParam(String),
    #[error("analytic gradient for {name:?} has shape {got:?}, parameter has {want:?}")]
    GradShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

type LeafMap = BTreeMap<String, Tensor<f64>>;

fn eval<F>(params: &[(String, Tensor<f64>)], f: &F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &LeafMap) -> Result<Tensor<f64>, EvalError>,
{
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new();
    for (name, value) in params {
        leaves.insert(name.clone(), tape.leaf(name.clone(), value)?);
    }
    let out = f(&mut tape, &leaves).map_err(GradCheckError::Eval)?;
    if out.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: out.shape().to_vec(),
        }
        .into());
    }
    Ok(out.item())
}

/// Compares a precomputed analytic gradient map against central differences
/// of `f`. Exposed separately so a deliberately wrong gradient map can be fed
/// in as a negative control.
pub fn finite_diff_against<F>(
    params: &[(String, Tensor<f64>)],
    step: f64,
    f: F,
    analytic: &Gradients<f64>,
) -> Result<FdReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &LeafMap) -> Result<Tensor<f64>, EvalError>,
{
    if step <= 0.0 {
        return Err(GradCheckError::BadStep(step));
    }
    let base = eval(params, &f)?;
    let again = eval(params, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(GradCheckError::NonDeterministic {
            first: base,
            second: again,
        });
    }
    for (name, value) in params {
        let g = analytic
            .get(name)
            .ok_or_else(|| GradCheckError::MissingParam(name.clone()))?;
        if g.shape() != value.shape() {
            return Err(GradCheckError::GradShape {
                name: name.clone(),
                got: g.shape().to_vec(),
                want: value.shape().to_vec(),
            });
        }
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    for pi in 0..params.len() {
        let name = params[pi].0.clone();
        let analytic_grad = &analytic[&name];
        for j in 0..params[pi].1.numel() {
            let orig = params[pi].1.data()[j];
            work[pi].1.data_mut()[j] = orig + step;
            let plus = eval(&work, &f)?;
            work[pi].1.data_mut()[j] = orig - step;
            let minus = eval(&work, &f)?;
            work[pi].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(analytic_grad.data()[j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

/// Runs `f` once with tracked leaves to obtain analytic gradients via the
/// tape, then compares them elementwise to central finite differences.
/// Returns the maximum relative error over all parameters.
pub fn finite_diff_check<F>(
    params: &[(String, Tensor<f64>)],
    step: f64,
    f: F,
) -> Result<FdReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &LeafMap) -> Result<Tensor<f64>, EvalError>,
{
    let mut tape = Tape::new();
    let mut leaves = LeafMap::new();
    for (name, value) in params {
        leaves.insert(name.clone(), tape.leaf(name.clone(), value)?);
    }
    let loss = f(&mut tape, &leaves).map_err(GradCheckError::Eval)?;
    let analytic = tape.backward(&loss)?;
    finite_diff_against(params, step, f, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn named(name: &str, shape: &[usize], data: &[f64]) -> (String, Tensor<f64>) {
        (
            name.to_string(),
            Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap(),
        )
    }

    #[test]
    fn exact_for_quadratics() {
        let params = vec![named("w", &[3], &[1.0, 2.0, 3.0])];
        let report = finite_diff_check(&params, 1e-3, |tape, leaves| {
            let s = tape.square_mean(&leaves["w"])?;
            Ok(tape.scalar_mul(&s, 3.0)?)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_backward_rule() {
        let params = vec![named("w", &[3], &[0.4, -1.2, 2.0])];
        let f = |tape: &mut Tape<f64>,
                 leaves: &BTreeMap<String, Tensor<f64>>|
         -> Result<Tensor<f64>, EvalError> {
            let s = tape.sigmoid(&leaves["w"])?;
            Ok(tape.square_mean(&s)?)
        };
        // Correct gradients pass...
        let good = finite_diff_check(&params, 1e-3, f).unwrap();
        assert!(good.max_rel_err <= 1e-6);
        // ...a corrupted map does not.
        let mut tape = Tape::new();
        let w = tape.leaf("w", &params[0].1).unwrap();
        let s = tape.sigmoid(&w).unwrap();
        let loss = tape.square_mean(&s).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        grads.get_mut("w").unwrap().data_mut()[1] *= 1.5;
        let bad = finite_diff_against(&params, 1e-3, f, &grads).unwrap();
        assert!(bad.max_rel_err > 1e-2, "err {}", bad.max_rel_err);
        assert_eq!(bad.worst.as_ref().unwrap().1, 1);
    }

    #[test]
    fn rejects_non_deterministic_function() {
        let params = vec![named("w", &[1], &[1.0])];
        let calls = Cell::new(0.0f64);
        let err = finite_diff_check(&params, 1e-3, |tape, leaves| {
            calls.set(calls.get() + 1.0);
            let jitter = Tensor::scalar(calls.get());
            let s = tape.mean(&leaves["w"])?;
            Ok(tape.mul(&s, &jitter)?)
        })
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_bad_step() {
        let params = vec![named("w", &[1], &[1.0])];
        let err =
            finite_diff_check(&params, 0.0, |tape, leaves| Ok(tape.mean(&leaves["w"])?))
                .unwrap_err();
        assert!(matches!(err, GradCheckError::BadStep(_)));
    }
}
