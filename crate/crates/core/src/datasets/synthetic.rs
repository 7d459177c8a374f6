use super::{Dataset, LabelSpace, Source};
use crate::error::{bail, Result};
use crate::numerics::Rng;
use crate::scalar::Scalar;

/// Gaussian blobs: class means uniform on a sphere of radius `separation`,
/// samples `mean + N(0, spread^2 I)`. Samples are stored class by class.
pub fn make_synthetic_clusters<T: Scalar>(
    rng: &mut Rng,
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    separation: f64,
) -> Result<Dataset<T>> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        bail!(Parameter, "class count, per-class count and dimension must be positive");
    }
    if !(spread >= 0.0) || !spread.is_finite() || !separation.is_finite() {
        bail!(Parameter, "spread must be finite and non-negative, got {spread}");
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= separation / norm);
            v
        })
        .collect();

    let mut ds = Dataset::empty(&[dim], LabelSpace::new(num_classes, 0)?);
    let mut buf = vec![T::zero(); dim];
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for (b, &m) in buf.iter_mut().zip(mean) {
                *b = T::lit(m + spread * rng.normal());
            }
            ds.push_raw(&buf, &[dim], class, Source::Identity, class)?;
        }
    }
    Ok(ds)
}
