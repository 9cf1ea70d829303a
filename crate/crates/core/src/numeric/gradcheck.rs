//! Central finite differences as an independent oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-12)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` builds the function on the given tape from a leaf holding `x`; it is
/// re-run on fresh tapes for every probe. Returns the maximum relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = f(&tape, leaf)?;
        match tape.grad(out, &[leaf]) {
            Ok(g) => g[0].value(),
            // A function that ignores its input has a zero gradient.
            Err(crate::Error::Unreachable { .. }) => Tensor::zeros(x.shape()),
            Err(e) => return Err(e),
        }
    };
    let numeric = central_difference(
        |probe| {
            let tape = Tape::new();
            let leaf = tape.leaf(probe.clone());
            Ok(f(&tape, leaf)?.item())
        },
        x,
        h,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -1.2]);
        let err = finite_difference_check(|tape, _x| Ok(tape.scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::vector(vec![0.7, -1.3, 1.9, -0.6, 1.1]);
        let err = finite_difference_check(|_, x| Ok(x.square().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }
}
