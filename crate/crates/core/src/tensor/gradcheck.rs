use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of a scalar function with central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradient<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    check_gradient_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`check_gradient`] over several inputs at once; every coordinate of every input is probed.
pub fn check_gradient_many<T, F>(f: F, xs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>,
{
    if !(eps >= T::lit(1e-7) && eps <= T::lit(1e-3)) {
        return Err(Error::Config(format!("gradient check step {eps} outside [1e-7, 1e-3]")));
    }

    let eval = |inputs: &[Tensor<T>], grad: bool| -> Result<(T, Option<Vec<Vec<T>>>)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.input(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::shape("check_gradient", tape.shape(out), &[]));
        }
        let y = tape.scalar(out);
        if !y.is_finite() {
            return Err(Error::numerical("check_gradient", "non-finite function value"));
        }
        if !grad {
            return Ok((y, None));
        }
        let g = tape.backward(out)?;
        let per_input = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.wrt(v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
            .collect();
        Ok((y, Some(per_input)))
    };

    let (_, analytic) = eval(xs, true)?;
    let analytic = analytic.expect("gradients requested");

    let mut worst = T::zero();
    let mut probe = xs.to_vec();
    let two = T::lit(2.0);
    for (ti, grads) in analytic.iter().enumerate() {
        for i in 0..xs[ti].len() {
            let orig = xs[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig - eps;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (two * eps);
            let err = (grads[i] - numeric).abs() / numeric.abs().max(T::one());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
