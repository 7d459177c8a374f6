use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_difference_gradient<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    let grad = finite_difference_entries(f, x, h, &all)?;
    Tensor::from_vec(x.shape(), grad)
}

/// Central differences for the listed flat indices only.
pub fn finite_difference_entries<T, F>(
    mut f: F,
    x: &Tensor<T>,
    h: T,
    indices: &[usize],
) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) || !h.is_finite() {
        bail!(Parameter, "finite-difference step must be positive, got {h}");
    }
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= x.len() {
            bail!(Shape, "index {i} out of range for {} elements", x.len());
        }
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            bail!(Numeric, "objective not finite near index {i}");
        }
        out.push((plus - minus) / two_h);
    }
    Ok(out)
}

/// Largest element-wise relative discrepancy between two gradients.
///
/// Each element is scaled by `max(|a_i|, |b_i|, floor)` where the floor is
/// `1e-3` of the larger infinity norm (and at least `1e-12`), so entries that are
/// tiny relative to the gradient are compared on an absolute scale instead of
/// amplifying finite-difference round-off.
pub fn relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let norm = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let floor = (1e-3 * norm).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            (a - b).abs() / a.abs().max(b.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
