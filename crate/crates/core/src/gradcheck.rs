//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Relative errors use `max(|analytic|, FLOOR)` as the denominator.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Maximum relative error between the reverse-mode gradient of `f` at `x`
/// and a central difference with the given `step`, over every coordinate.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, step, &coords)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at<T, F>(f: F, x: &Tensor<T>, step: f64, coords: &[usize]) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(crate::error::config_err!("finite-difference step must be positive, got {step}"));
    }
    let analytic = {
        let mut g = Graph::new();
        let xv = g.input(x.shape(), x.data().to_vec(), true)?;
        let y = f(&mut g, xv)?;
        if g.value(y).len() != 1 {
            return Err(shape_err!("checked function must be scalar, got {:?}", g.shape(y)));
        }
        g.backward(y)?.wrt(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.numel()])
    };
    let eval = |data: Vec<T>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.shape(), data, false)?;
        let y = f(&mut g, xv)?;
        Ok(g.value(y)[0].as_f64())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let base = x.data()[i].as_f64();
        let mut plus = x.data().to_vec();
        plus[i] = T::lit(base + step);
        let mut minus = x.data().to_vec();
        minus[i] = T::lit(base - step);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i].as_f64();
        let err = (a - numeric).abs() / a.abs().max(RELATIVE_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
