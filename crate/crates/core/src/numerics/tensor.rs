use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// `shape.iter().product() == data.len()` always holds. Constructors reject
/// non-finite values so NaN/Inf cannot enter through the public surface.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Shape,
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            );
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite value at flat index {pos}");
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Shape, "ragged rows");
        }
        Self::from_vec(&[rows.len(), cols], rows.concat())
    }

    /// Builds from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading dimension (1 for a 0-d tensor).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.ndim(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {shape:?}", self.shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.as_f64()))
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            bail!(Shape, "axpy shape {:?} vs {:?}", self.shape, other.shape);
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            bail!(Numeric, "{what} contains non-finite values");
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            bail!(Shape, "transpose needs a matrix, got {:?}", self.shape);
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        gemm(self, other)
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, trans: Transpose, name: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        bail!(Shape, "{name} must be a matrix, got shape {:?}", t.shape());
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    Ok(match trans {
        Transpose::No => (r, c),
        Transpose::Yes => (c, r),
    })
}

/// Standard row-major matrix product `a * b`.
pub fn gemm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, _) = matrix_dims(a, Transpose::No, "lhs")?;
    let (_, n) = matrix_dims(b, Transpose::No, "rhs")?;
    let mut c = Tensor::zeros(&[m, n]);
    gemm_into(T::one(), a, Transpose::No, b, Transpose::No, T::zero(), &mut c)?;
    Ok(c)
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm_into<T: Scalar>(
    alpha: T,
    a: &Tensor<T>,
    ta: Transpose,
    b: &Tensor<T>,
    tb: Transpose,
    beta: T,
    c: &mut Tensor<T>,
) -> Result<()> {
    let (m, k) = matrix_dims(a, ta, "lhs")?;
    let (k2, n) = matrix_dims(b, tb, "rhs")?;
    if k != k2 {
        bail!(
            Shape,
            "inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    }
    if c.shape() != [m, n] {
        bail!(Shape, "output shape {:?}, expected [{m}, {n}]", c.shape());
    }
    gemm_slices(m, k, n, alpha, &a.data, ta, &b.data, tb, beta, &mut c.data);
    if !c.is_finite() {
        bail!(Numeric, "matrix product overflowed");
    }
    Ok(())
}

/// Product of contiguous row-major matrices, `op(a)` being `m x k` and `op(b)` `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_slices<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    // SAFETY: lengths were asserted above; `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
