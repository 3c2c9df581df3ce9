use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Compares the tape gradient of a scalar function against central finite
/// differences at 64-bit precision.
///
/// `f` must build its graph on the tape it is handed, reading the checked
/// input from the `Var` argument. Returns the largest
/// `|analytic - numeric| / (|numeric| + 1e-8)` over all input elements.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_with(f, x, eps, |_| true)
}

/// Like [`grad_check`], but only the elements selected by `probe(i)` are
/// perturbed.
pub fn grad_check_with<F>(f: F, x: &Tensor, eps: f64, probe: impl Fn(usize) -> bool) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |input: Tensor| -> Result<f64> {
        let tape = Tape::new(DType::F64);
        let v = tape.constant(input);
        Ok(f(&tape, v)?.item())
    };
    let x = x.clone().to_dtype(DType::F64);
    let first = eval(x.clone())?;
    let second = eval(x.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let tape = Tape::new(DType::F64);
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    tape.backward(root)?;
    let analytic = leaf.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut worst = 0.0f64;
    let mut probe_x = x.clone();
    for i in 0..x.len() {
        if !probe(i) {
            continue;
        }
        let orig = x.data()[i];
        probe_x.data_mut()[i] = orig + eps;
        let up = eval(probe_x.clone())?;
        probe_x.data_mut()[i] = orig - eps;
        let down = eval(probe_x.clone())?;
        probe_x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    #[test]
    fn square_sum_is_exact_enough() {
        let x = Tensor::new([4], vec![0.5, -1.5, 2.0, 3.25]).unwrap();
        let err = grad_check(|_, x| x.square()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0u32);
        let x = Tensor::ones([3]);
        let res = grad_check(
            |_, x| {
                calls.set(calls.get() + 1);
                x.scale(calls.get() as f64)?.sum()
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // straddling the kink: numeric slope ~1e-4, analytic slope 1
        let x = Tensor::new([1], vec![1e-9]).unwrap();
        let err = grad_check(|_, x| x.abs()?.sum(), &x, 1e-5).unwrap();
        assert!(err > 1.0);
    }
}
