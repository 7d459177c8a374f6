//! Layer kernels. Activations are row-major per sample: `[H, W, C]` for spatial
//! layers, a flat vector for fully-connected ones.

use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor, Transpose};
use crate::numerics::gemm_slices;
use crate::scalar::Scalar;

/// Weight initialization for conv and fully-connected layers (biases start at 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    Gaussian { std: f64 },
    /// Uniform on `±sqrt(3 / fan_in)`.
    Xavier,
}

impl WeightInit {
    fn draw<T: Scalar>(self, rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor<T> {
        match self {
            WeightInit::Gaussian { std } => Tensor::from_fn(shape, |_| T::lit(rng.gaussian(0.0, std))),
            WeightInit::Xavier => {
                let bound = (3.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit((2.0 * rng.uniform() - 1.0) * bound))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub(crate) in_shape: [usize; 3],
    pub(crate) out_channels: usize,
    pub(crate) kernel: usize,
    pub(crate) stride: usize,
    pub(crate) padding: usize,
    /// `[kernel * kernel * in_channels, out_channels]`, rows ordered `(ky, kx, c_in)`.
    pub(crate) weight: Tensor<T>,
    pub(crate) bias: Tensor<T>,
}

/// Upper bound on unfolded patch elements held at once.
const COL_BUDGET: usize = 1 << 22;

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl<T: Scalar> Conv2d<T> {
    pub(crate) fn new(
        in_shape: [usize; 3],
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: WeightInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        if out_channels == 0 || kernel == 0 || stride == 0 {
            bail!(Parameter, "conv parameters must be positive");
        }
        let mut conv = Conv2d {
            in_shape,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::zeros(&[0, 0]),
            bias: Tensor::zeros(&[out_channels]),
        };
        conv.out_shape()?;
        let rows = kernel * kernel * in_shape[2];
        conv.weight = init.draw(rng, rows, &[rows, out_channels]);
        Ok(conv)
    }

    pub(crate) fn out_shape(&self) -> Result<[usize; 3]> {
        let [h, w, _] = self.in_shape;
        match (
            conv_extent(h, self.kernel, self.stride, self.padding),
            conv_extent(w, self.kernel, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) => Ok([oh, ow, self.out_channels]),
            _ => bail!(
                Shape,
                "conv kernel {} does not fit input {:?} with padding {}",
                self.kernel,
                self.in_shape,
                self.padding
            ),
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_shape[2]
    }

    /// Unfolds one sample into `[oh * ow, patch_len]`.
    fn im2col(&self, input: &[T], col: &mut [T], oh: usize, ow: usize) {
        let [h, w, c] = self.in_shape;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let patch = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut col[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            dst.fill(T::zero());
                        } else {
                            let at = (iy as usize * w + ix as usize) * c;
                            dst.copy_from_slice(&input[at..at + c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatters `[oh * ow, patch_len]` patch gradients back onto one input sample.
    fn col2im(&self, col: &[T], grad_in: &mut [T], oh: usize, ow: usize) {
        let [h, w, c] = self.in_shape;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let patch = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &col[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = (iy as usize * w + ix as usize) * c;
                        let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for (g, &v) in grad_in[at..at + c].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }

    /// Samples unfolded together so each gemm sees several images at once.
    fn group(&self, batch: usize) -> usize {
        let per = self.out_shape().map(|[oh, ow, _]| oh * ow * self.patch_len()).unwrap_or(1).max(1);
        (COL_BUDGET / per).clamp(1, batch.max(1))
    }

    pub(crate) fn forward(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        let [oh, ow, oc] = self.out_shape()?;
        let in_len: usize = self.in_shape.iter().product();
        let positions = oh * ow;
        let patch = self.patch_len();
        let group = self.group(batch);
        let mut col = vec![T::zero(); group * positions * patch];
        let mut out = vec![T::zero(); batch * positions * oc];
        for start in (0..batch).step_by(group) {
            let n = group.min(batch - start);
            for j in 0..n {
                let b = start + j;
                self.im2col(
                    &input[b * in_len..(b + 1) * in_len],
                    &mut col[j * positions * patch..(j + 1) * positions * patch],
                    oh,
                    ow,
                );
            }
            let dst = &mut out[start * positions * oc..(start + n) * positions * oc];
            gemm_slices(
                n * positions,
                patch,
                oc,
                T::one(),
                &col[..n * positions * patch],
                Transpose::No,
                self.weight.data(),
                Transpose::No,
                T::zero(),
                dst,
            );
            for px in dst.chunks_exact_mut(oc) {
                for (v, &bias) in px.iter_mut().zip(self.bias.data()) {
                    *v += bias;
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_weight, grad_bias, grad_input)`; the input gradient is
    /// empty unless `want_input`.
    pub(crate) fn backward(
        &self,
        input: &[T],
        grad_out: &[T],
        batch: usize,
        want_input: bool,
    ) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let [oh, ow, oc] = self.out_shape()?;
        let in_len: usize = self.in_shape.iter().product();
        let positions = oh * ow;
        let patch = self.patch_len();
        let group = self.group(batch);
        let mut col = vec![T::zero(); group * positions * patch];
        let mut grad_col = if want_input { vec![T::zero(); group * positions * patch] } else { Vec::new() };
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(&[oc]);
        let mut gin = if want_input { vec![T::zero(); batch * in_len] } else { Vec::new() };
        for px in grad_out.chunks_exact(oc) {
            for (acc, &v) in gb.data_mut().iter_mut().zip(px) {
                *acc += v;
            }
        }
        for start in (0..batch).step_by(group) {
            let n = group.min(batch - start);
            let rows = n * positions;
            let g = &grad_out[start * positions * oc..(start + n) * positions * oc];
            for j in 0..n {
                let b = start + j;
                self.im2col(
                    &input[b * in_len..(b + 1) * in_len],
                    &mut col[j * positions * patch..(j + 1) * positions * patch],
                    oh,
                    ow,
                );
            }
            gemm_slices(
                patch,
                rows,
                oc,
                T::one(),
                &col[..rows * patch],
                Transpose::Yes,
                g,
                Transpose::No,
                T::one(),
                gw.data_mut(),
            );
            if !want_input {
                continue;
            }
            gemm_slices(
                rows,
                oc,
                patch,
                T::one(),
                g,
                Transpose::No,
                self.weight.data(),
                Transpose::Yes,
                T::zero(),
                &mut grad_col[..rows * patch],
            );
            for j in 0..n {
                let b = start + j;
                self.col2im(
                    &grad_col[j * positions * patch..(j + 1) * positions * patch],
                    &mut gin[b * in_len..(b + 1) * in_len],
                    oh,
                    ow,
                );
            }
        }
        Ok((gw, gb, gin))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool2d {
    pub(crate) in_shape: [usize; 3],
    pub(crate) window: usize,
    pub(crate) stride: usize,
}

impl MaxPool2d {
    pub(crate) fn new(in_shape: [usize; 3], window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            bail!(Parameter, "pool window and stride must be positive");
        }
        let pool = MaxPool2d {
            in_shape,
            window,
            stride,
        };
        pool.out_shape()?;
        Ok(pool)
    }

    pub(crate) fn out_shape(&self) -> Result<[usize; 3]> {
        let [h, w, c] = self.in_shape;
        match (
            conv_extent(h, self.window, self.stride, 0),
            conv_extent(w, self.window, self.stride, 0),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([oh, ow, c]),
            _ => bail!(Shape, "pool window {} exceeds input {:?}", self.window, self.in_shape),
        }
    }

    /// Output plus, per output element, the flat input index of its maximum
    /// (first maximum on ties).
    pub(crate) fn forward<T: Scalar>(&self, input: &[T], batch: usize) -> Result<(Vec<T>, Vec<usize>)> {
        let [h, w, c] = self.in_shape;
        let [oh, ow, _] = self.out_shape()?;
        let in_len = h * w * c;
        let mut out = Vec::with_capacity(batch * oh * ow * c);
        let mut argmax = Vec::with_capacity(batch * oh * ow * c);
        for b in 0..batch {
            let base = b * in_len;
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = base + ((oy * self.stride) * w + ox * self.stride) * c + ch;
                        for ky in 0..self.window {
                            for kx in 0..self.window {
                                let at = base + ((oy * self.stride + ky) * w + ox * self.stride + kx) * c + ch;
                                if input[at] > input[best] {
                                    best = at;
                                }
                            }
                        }
                        out.push(input[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok((out, argmax))
    }

    pub(crate) fn backward<T: Scalar>(&self, argmax: &[usize], grad_out: &[T], batch: usize) -> Vec<T> {
        let in_len: usize = self.in_shape.iter().product();
        let mut gin = vec![T::zero(); batch * in_len];
        for (&at, &g) in argmax.iter().zip(grad_out) {
            gin[at] += g;
        }
        gin
    }
}

/// Parametric ReLU with one slope per channel (the last activation dimension).
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu<T> {
    pub(crate) slopes: Tensor<T>,
}

impl<T: Scalar> PRelu<T> {
    pub(crate) fn new(channels: usize, slope: T) -> Self {
        PRelu {
            slopes: Tensor::full(&[channels], slope),
        }
    }

    pub(crate) fn forward(&self, input: &[T]) -> Vec<T> {
        let a = self.slopes.data();
        let c = a.len();
        input
            .iter()
            .enumerate()
            .map(|(i, &x)| if x > T::zero() { x } else { a[i % c] * x })
            .collect()
    }

    /// Returns `(grad_slopes, grad_input)`.
    pub(crate) fn backward(&self, input: &[T], grad_out: &[T]) -> (Tensor<T>, Vec<T>) {
        let a = self.slopes.data();
        let c = a.len();
        let mut ga = Tensor::zeros(&[c]);
        let gin = input
            .iter()
            .zip(grad_out)
            .enumerate()
            .map(|(i, (&x, &g))| {
                if x > T::zero() {
                    g
                } else {
                    ga.data_mut()[i % c] += x * g;
                    a[i % c] * g
                }
            })
            .collect();
        (ga, gin)
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub(crate) weight: Tensor<T>,
    pub(crate) bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn new(in_features: usize, out_features: usize, init: WeightInit, rng: &mut Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            bail!(Parameter, "fully-connected widths must be positive");
        }
        Ok(Linear {
            weight: init.draw(rng, in_features, &[in_features, out_features]),
            bias: Tensor::zeros(&[out_features]),
        })
    }

    pub(crate) fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub(crate) fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward(&self, input: &[T], batch: usize) -> Vec<T> {
        let (i, o) = (self.in_features(), self.out_features());
        let mut out = Vec::with_capacity(batch * o);
        for _ in 0..batch {
            out.extend_from_slice(self.bias.data());
        }
        gemm_slices(batch, i, o, T::one(), input, Transpose::No, self.weight.data(), Transpose::No, T::one(), &mut out);
        out
    }

    /// Returns `(grad_weight, grad_bias, grad_input)`.
    pub(crate) fn backward(&self, input: &[T], grad_out: &[T], batch: usize) -> (Tensor<T>, Tensor<T>, Vec<T>) {
        let (i, o) = (self.in_features(), self.out_features());
        let mut gw = Tensor::zeros(&[i, o]);
        gemm_slices(i, batch, o, T::one(), input, Transpose::Yes, grad_out, Transpose::No, T::zero(), gw.data_mut());
        let mut gb = Tensor::zeros(&[o]);
        for row in grad_out.chunks_exact(o) {
            for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut gin = vec![T::zero(); batch * i];
        gemm_slices(batch, o, i, T::one(), grad_out, Transpose::No, self.weight.data(), Transpose::Yes, T::zero(), &mut gin);
        (gw, gb, gin)
    }
}
