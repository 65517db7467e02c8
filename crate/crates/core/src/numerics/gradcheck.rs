use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport<S> {
    /// Per input tensor, per coordinate relative error.
    pub relative_errors: Vec<Vec<S>>,
    pub max_relative_error: S,
    /// `(input, coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor<S>>,
    pub numeric: Vec<Tensor<S>>,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let den = analytic.abs().max(numeric.abs()).max(S::lit(1e-8));
    (analytic - numeric).abs() / den
}

fn eval_scalar<S, F>(f: &F, point: &[Tensor<S>]) -> Result<(Tape<S>, Var, Vec<Var>)>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let inputs: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &inputs)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check: function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite {
            what: "grad_check function value".into(),
            context: None,
        });
    }
    Ok((tape, out, inputs))
}

/// Checks the tape gradient of a scalar function of `point` against
/// central finite differences with step `epsilon`.
pub fn grad_check<S, F>(f: F, point: &[Tensor<S>], epsilon: S) -> Result<GradCheckReport<S>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(epsilon > S::zero() && epsilon <= S::lit(1e-2)) {
        return Err(Error::invalid("grad_check: epsilon must lie in (0, 1e-2]"));
    }
    let (tape, out, inputs) = eval_scalar(&f, point)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<S>> = inputs
        .iter()
        .zip(point)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let two = S::lit(2.0);
    let mut numeric = Vec::with_capacity(point.len());
    let mut relative_errors = Vec::with_capacity(point.len());
    let mut max_relative_error = S::zero();
    let mut worst = (0, 0);
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let mut num = Tensor::zeros(point[i].shape().to_vec());
        let mut errs = Vec::with_capacity(point[i].len());
        for j in 0..point[i].len() {
            let x0 = point[i].data()[j];
            probe[i].data_mut()[j] = x0 + epsilon;
            let (tp, op, _) = eval_scalar(&f, &probe)?;
            let fp = tp.value(op).item();
            probe[i].data_mut()[j] = x0 - epsilon;
            let (tm, om, _) = eval_scalar(&f, &probe)?;
            let fm = tm.value(om).item();
            probe[i].data_mut()[j] = x0;
            let n = (fp - fm) / (two * epsilon);
            num.data_mut()[j] = n;
            let e = relative_error(analytic[i].data()[j], n);
            if e > max_relative_error {
                max_relative_error = e;
                worst = (i, j);
            }
            errs.push(e);
        }
        numeric.push(num);
        relative_errors.push(errs);
    }
    Ok(GradCheckReport {
        relative_errors,
        max_relative_error,
        worst,
        analytic,
        numeric,
    })
}
