use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::dim("grad_check", v.shape(), &[1, 1]));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite(format!(
            "function value {} during gradient check",
            v.item()
        )));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(p+eps) - f(p-eps)) / (2 eps)` on every coordinate of every input.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let (tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + eps;
            let (t, _, o) = evaluate(&f, &probe)?;
            let plus = t.value(o).item();
            probe[i].data_mut()[j] = base - eps;
            let (t, _, o) = evaluate(&f, &probe)?;
            let minus = t.value(o).item();
            probe[i].data_mut()[j] = base;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: rel,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let r = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let r = grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(4.0))), &[x], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(|tape, v| Ok(tape.sum(v[0])), &[x], 1e-2);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(|tape, v| Ok(tape.affine(v[0], f64::INFINITY, 0.0)), &[x], 1e-5);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
