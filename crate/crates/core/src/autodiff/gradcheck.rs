//! Central finite-difference verification of tape gradients.

use crate::error::{GradCheckError, ShapeError};
use crate::tensor::{Shape, Tensor};

use super::{Tape, Var};

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
    /// Maximum relative error for each input, in input order.
    pub per_input: Vec<f64>,
    pub pass: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Check `f` against central differences in every coordinate of `x`.
pub fn fd_gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<CheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &Var<f64>) -> Result<Var<f64>, ShapeError>,
{
    check_gradients(
        |t, xs| f(t, &xs[0]),
        std::slice::from_ref(x),
        eps,
        tol,
        |_, _| {},
    )
}

/// Finite-difference formula used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴). Lets a
    /// larger `h` keep roundoff low on deep, smooth graphs.
    FivePoint,
}

/// Check `f` against central differences in every coordinate of every input.
///
/// `perturb` may rewrite the tape gradient of each input before comparison;
/// it exists so negative controls can corrupt a gradient on purpose.
pub fn check_gradients<F, P>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    perturb: P,
) -> Result<CheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>, ShapeError>,
    P: FnMut(usize, &mut Tensor<f64>),
{
    check_gradients_with(f, inputs, eps, tol, Stencil::Central, perturb)
}

/// [`check_gradients`] with an explicit stencil.
pub fn check_gradients_with<F, P>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    stencil: Stencil,
    mut perturb: P,
) -> Result<CheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>, ShapeError>,
    P: FnMut(usize, &mut Tensor<f64>),
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        if y.shape() != Shape::scalar() {
            return Err(GradCheckError::NotScalar(y.shape().dims()));
        }
        Ok(y.value().data()[0])
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    if y.shape() != Shape::scalar() {
        return Err(GradCheckError::NotScalar(y.shape().dims()));
    }
    if y.requires_grad() {
        tape.backward(&y)?;
    }
    let mut analytic: Vec<_> = vars.iter().map(|v| tape.grad_or_zeros(v)).collect();
    for (i, g) in analytic.iter_mut().enumerate() {
        perturb(i, g);
    }
    drop(tape);

    let mut report = CheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
        per_input: vec![0.0; inputs.len()],
        pass: true,
    };
    let mut work: Vec<_> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            let mut at = |k: f64| -> Result<f64, GradCheckError> {
                work[i].data_mut()[e] = orig + k * eps;
                eval(&work)
            };
            let numeric = match stencil {
                Stencil::Central => (at(1.0)? - at(-1.0)?) / (2.0 * eps),
                Stencil::FivePoint => {
                    (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * eps)
                }
            };
            work[i].data_mut()[e] = orig;
            let a = grad.data()[e];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.per_input[i] = report.per_input[i].max(rel);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some(Worst {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_point_beats_central_on_a_curved_function() {
        let x = Tensor::from_f64_slice([1, 1, 1, 3], &[0.3, -1.1, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, xs: &[Var<f64>]| {
            let y = t.gelu(&xs[0]);
            let y = t.mul(&y, &y)?;
            Ok(t.sum(&y))
        };
        let c = check_gradients_with(f, std::slice::from_ref(&x), 1e-2, 1.0, Stencil::Central, |_, _| {}).unwrap();
        let p = check_gradients_with(f, std::slice::from_ref(&x), 1e-2, 1.0, Stencil::FivePoint, |_, _| {}).unwrap();
        assert!(p.max_abs_err < 1e-7, "{p:?}");
        assert!(p.max_abs_err < c.max_abs_err / 100.0);
    }

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_f64_slice([1, 1, 2, 3], &[0.1, -0.2, 0.3, 1.5, -2.0, 0.0]).unwrap();
        let r = fd_gradcheck(|t, x| Ok(t.sum(x)), &x, 1e-4, 1e-4).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn gelu_sum_passes() {
        let x = Tensor::from_f64_slice([1, 1, 1, 2], &[0.5, -0.3]).unwrap();
        let r = fd_gradcheck(
            |t, x| {
                let g = t.gelu(x);
                Ok(t.sum(&g))
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::from_f64_slice([1, 1, 1, 1], &[1.0]).unwrap();
        let err = fd_gradcheck(
            |t, x| {
                calls.set(calls.get() + 1.0);
                let k = calls.get();
                let s = t.sum(x);
                Ok(t.scale(&s, k))
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::from_f64_slice([1, 1, 1, 3], &[0.1, 0.2, 0.3]).unwrap();
        let r = check_gradients(
            |t, xs| {
                let sq = t.mul(&xs[0], &xs[0])?;
                Ok(t.sum(&sq))
            },
            std::slice::from_ref(&x),
            1e-4,
            1e-4,
            |_, g| g.data_mut()[1] *= 1.5,
        )
        .unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst.unwrap().element, 1);
    }
}
