use super::LossOutput;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{bail, Result};
use crate::network::checkpoint::{read_tensor, write_tensor};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    /// `d = |x - c|^2 / 4`.
    Euclidean,
    /// `d = (1 - cos) / 2` on normalized vectors.
    Angular,
}

impl DistanceMode {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMode::Euclidean => "euclidean",
            DistanceMode::Angular => "angular",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMode::Euclidean),
            "angular" => Ok(DistanceMode::Angular),
            _ => bail!(Configuration, "unknown distance mode {s:?} (expected euclidean or angular)"),
        }
    }
}

/// One feature center per label (identities first, then sequences).
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTable<T> {
    centers: Tensor<T>,
    mode: DistanceMode,
    center_lr: f64,
}

pub(crate) fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&a| a * a).sum::<T>().sqrt()
}

fn unit_tolerance<T: Scalar>() -> f64 {
    (16.0 * T::epsilon().as_f64()).max(1e-9)
}

impl<T: Scalar> CenterTable<T> {
    /// Zero centers in euclidean mode; seeded random unit rows in angular mode.
    pub fn new(num_centers: usize, dim: usize, mode: DistanceMode, center_lr: f64, rng: &mut Rng) -> Result<Self> {
        if num_centers == 0 || dim == 0 {
            bail!(Parameter, "center table needs positive size, got {num_centers} x {dim}");
        }
        let mut centers = Tensor::zeros(&[num_centers, dim]);
        if mode == DistanceMode::Angular {
            for r in 0..num_centers {
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if n > 1e-6 {
                        for (c, a) in centers.row_mut(r).iter_mut().zip(v) {
                            *c = T::lit(a / n);
                        }
                        break;
                    }
                }
            }
        }
        Self::from_tensor(centers, mode, center_lr)
    }

    pub fn from_tensor(centers: Tensor<T>, mode: DistanceMode, center_lr: f64) -> Result<Self> {
        if centers.ndim() != 2 || centers.rows() == 0 || centers.row_len() == 0 {
            bail!(Shape, "centers must be a non-empty [N, dim] tensor, got {:?}", centers.shape());
        }
        if !(center_lr > 0.0 && center_lr.is_finite()) {
            bail!(Parameter, "center learning rate must be positive, got {center_lr}");
        }
        centers.ensure_finite("centers")?;
        let table = CenterTable {
            centers,
            mode,
            center_lr,
        };
        if mode == DistanceMode::Angular {
            for r in 0..table.num_centers() {
                let n = norm(table.centers.row(r)).as_f64();
                if (n - 1.0).abs() > unit_tolerance::<T>() {
                    bail!(Consistency, "angular center {r} has norm {n}, expected 1");
                }
            }
        }
        Ok(table)
    }

    pub fn centers(&self) -> &Tensor<T> {
        &self.centers
    }

    pub fn center(&self, n: usize) -> &[T] {
        self.centers.row(n)
    }

    pub fn mode(&self) -> DistanceMode {
        self.mode
    }

    pub fn center_lr(&self) -> f64 {
        self.center_lr
    }

    pub fn num_centers(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.row_len()
    }

    pub(crate) fn check_labels(&self, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
        if features.ndim() != 2 || features.row_len() != self.dim() {
            bail!(
                Shape,
                "features {:?} do not match center dimension {}",
                features.shape(),
                self.dim()
            );
        }
        if labels.len() != features.rows() {
            bail!(Shape, "{} labels for {} feature rows", labels.len(), features.rows());
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_centers()) {
            bail!(Label, "label {bad} outside {} centers", self.num_centers());
        }
        Ok(())
    }

    /// Moves every center present in the batch toward its samples:
    /// `c += lr * scale * Σ(x - c) / (1 + n)`. In angular mode the targets are
    /// the normalized features and updated rows are renormalized.
    pub(crate) fn attract(&mut self, features: &Tensor<T>, labels: &[usize], scale: f64) -> Result<()> {
        self.check_labels(features, labels)?;
        let dim = self.dim();
        let mut sums = vec![T::zero(); self.num_centers() * dim];
        let mut counts = vec![0usize; self.num_centers()];
        for (k, &y) in labels.iter().enumerate() {
            let x = features.row(k);
            let inv = match self.mode {
                DistanceMode::Euclidean => T::one(),
                DistanceMode::Angular => {
                    let n = norm(x);
                    if n == T::zero() {
                        bail!(Numeric, "zero-norm feature in angular center update");
                    }
                    T::one() / n
                }
            };
            let c = self.centers.row(y);
            for ((s, &xv), &cv) in sums[y * dim..(y + 1) * dim].iter_mut().zip(x).zip(c) {
                *s += xv * inv - cv;
            }
            counts[y] += 1;
        }
        let step = T::lit(self.center_lr * scale);
        for (n, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let denom = T::from_usize_lossy(1 + count);
            let row = self.centers.row_mut(n);
            for (c, &s) in row.iter_mut().zip(&sums[n * dim..(n + 1) * dim]) {
                *c += step * s / denom;
            }
            if self.mode == DistanceMode::Angular {
                let len = norm(row);
                if len == T::zero() {
                    bail!(Numeric, "center {n} collapsed to zero during update");
                }
                for c in row.iter_mut() {
                    *c /= len;
                }
            }
        }
        self.centers.ensure_finite("centers")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.str(self.mode.name());
        w.f64(self.center_lr);
        write_tensor(&mut w, &self.centers);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let mode = DistanceMode::parse(&r.str()?)?;
        let lr = r.f64()?;
        let centers = read_tensor(&mut r)?;
        r.finish()?;
        Self::from_tensor(centers, mode, lr)
    }
}

/// `½ Σ_k |x_k - c_{y_k}|²` with gradient `x_k - c_{y_k}`. Identity and sequence
/// labels are treated alike.
pub fn center_loss<T: Scalar>(features: &Tensor<T>, labels: &[usize], centers: &CenterTable<T>) -> Result<LossOutput<T>> {
    centers.check_labels(features, labels)?;
    let mut grad = features.clone();
    let mut loss = T::zero();
    for (k, &y) in labels.iter().enumerate() {
        for (g, &c) in grad.row_mut(k).iter_mut().zip(centers.center(y)) {
            *g -= c;
            loss += *g * *g;
        }
    }
    Ok(LossOutput {
        loss: loss * T::lit(0.5),
        grad,
    })
}

/// Standard center-loss update: `c_n += lr * Σ(x - c_n) / (1 + n_n)`.
pub fn center_update<T: Scalar>(features: &Tensor<T>, labels: &[usize], centers: &mut CenterTable<T>) -> Result<()> {
    centers.attract(features, labels, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};

    fn table(rows: &[Vec<f64>]) -> CenterTable<f64> {
        CenterTable::from_tensor(Tensor::from_rows(rows).unwrap(), DistanceMode::Euclidean, 0.5).unwrap()
    }

    #[test]
    fn features_on_centers_cost_nothing() {
        let t = table(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let x = Tensor::from_rows(&[vec![-1.0, 0.5], vec![1.0, 2.0]]).unwrap();
        let out = center_loss(&x, &[1, 0], &t).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_arithmetic() {
        let t = table(&[vec![0.0, 0.0]]);
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let out = center_loss(&x, &[0], &t).unwrap();
        assert_eq!(out.loss, 1.0);
        assert_eq!(out.grad.data(), [1.0, 1.0]);
    }

    #[test]
    fn random_batch_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let t = CenterTable::from_tensor(Tensor::from_fn(&[4, 3], |_| rng.normal()), DistanceMode::Euclidean, 0.5)
            .unwrap();
        let x = Tensor::from_fn(&[6, 3], |_| rng.normal());
        let labels = [0, 3, 3, 1, 2, 0];
        let out = center_loss(&x, &labels, &t).unwrap();
        let numeric = finite_difference_gradient(|v| Ok(center_loss(v, &labels, &t)?.loss), &x, 1e-5).unwrap();
        assert!(relative_error(out.grad.data(), numeric.data()) < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let t = table(&[vec![0.0, 0.0]]);
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(center_loss(&x, &[1], &t), Err(crate::Error::Label(_))));
    }

    #[test]
    fn angular_table_has_unit_rows() {
        let t = CenterTable::<f64>::new(7, 3, DistanceMode::Angular, 0.5, &mut Rng::new(2)).unwrap();
        for r in 0..7 {
            assert!((norm(t.center(r)) - 1.0).abs() < 1e-12);
        }
        let z = CenterTable::<f64>::new(7, 3, DistanceMode::Euclidean, 0.5, &mut Rng::new(2)).unwrap();
        assert!(z.centers().data().iter().all(|&v| v == 0.0));
        let bad = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(CenterTable::from_tensor(bad, DistanceMode::Angular, 0.5).is_err());
    }

    #[test]
    fn center_update_standard_step() {
        let mut t = CenterTable::from_tensor(Tensor::<f64>::zeros(&[2, 2]), DistanceMode::Euclidean, 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        center_update(&x, &[0], &mut t).unwrap();
        assert_eq!(t.center(0), [0.5, 0.5]);
        assert_eq!(t.center(1), [0.0, 0.0]);
    }

    #[test]
    fn serialization_round_trip() {
        let t = CenterTable::<f64>::new(5, 2, DistanceMode::Angular, 0.25, &mut Rng::new(3)).unwrap();
        let bytes = t.to_bytes();
        let back = CenterTable::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
        assert!(CenterTable::<f64>::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
