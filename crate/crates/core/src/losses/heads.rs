//! Classifier heads mapping embeddings to class logits.

use super::centers::norm;
use crate::codec::{ByteReader, ByteWriter};
use crate::datasets::Source;
use crate::error::{bail, Result};
use crate::network::checkpoint::{read_tensor, write_tensor};
use crate::network::WeightInit;
use crate::numerics::{gemm_slices, Rng, Tensor, Transpose};
use crate::scalar::Scalar;

/// Margin blending weight per iteration: `max(min, base / (1 + gamma * iter))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub base: f64,
    pub gamma: f64,
    pub min: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            base: 1000.0,
            gamma: 0.12,
            min: 5.0,
        }
    }
}

impl AnnealSchedule {
    /// A schedule that stays at `value`.
    pub fn constant(value: f64) -> Self {
        AnnealSchedule {
            base: value,
            gamma: 0.0,
            min: value,
        }
    }

    pub fn at(&self, iteration: u64) -> f64 {
        (self.base / (1.0 + self.gamma * iteration as f64)).max(self.min)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base >= 0.0 && self.gamma >= 0.0 && self.min >= 0.0) || !self.base.is_finite() {
            bail!(Parameter, "anneal schedule values must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularMarginConfig {
    /// Scale applied to the normalized cosines.
    pub delta: f64,
    /// Angular margin multiplier.
    pub m: u32,
    /// Weight of the plain cosine in the blended target logit
    /// `(ψ(θ) + anneal · cos θ) / (1 + anneal)`.
    pub anneal: f64,
}

impl Default for AngularMarginConfig {
    fn default() -> Self {
        AngularMarginConfig {
            delta: 32.0,
            m: 4,
            anneal: 0.0,
        }
    }
}

impl AngularMarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            bail!(Parameter, "scale must be positive, got {}", self.delta);
        }
        if self.m == 0 {
            bail!(Parameter, "margin must be at least 1");
        }
        if !(self.anneal >= 0.0 && self.anneal.is_finite()) {
            bail!(Parameter, "anneal weight must be finite and >= 0, got {}", self.anneal);
        }
        Ok(())
    }
}

/// `ψ(θ) = (-1)^k cos(mθ) - 2k` for `θ ∈ [kπ/m, (k+1)π/m]`, written in terms of
/// `c = cos θ` with Chebyshev polynomials so the derivative has no `sin θ` pole.
/// Returns `(ψ, dψ/dc)`.
pub(crate) fn margin_psi(c: f64, m: u32) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let k = ((m as f64 * c.acos() / std::f64::consts::PI).floor() as u32).min(m - 1);
    // T_m(c) and U_{m-1}(c) by the three-term recurrences.
    let (mut t0, mut t1) = (1.0, c);
    let (mut u0, mut u1) = (0.0, 1.0);
    for _ in 1..m {
        (t0, t1) = (t1, 2.0 * c * t1 - t0);
        (u0, u1) = (u1, 2.0 * c * u1 - u0);
    }
    let tm = if m == 0 { t0 } else { t1 };
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    (sign * tm - 2.0 * k as f64, sign * m as f64 * u1)
}

/// Fully-connected classifier `logits = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    /// `[dim, classes]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn new(dim: usize, classes: usize, init: WeightInit, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || classes == 0 {
            bail!(Parameter, "head needs positive sizes");
        }
        let weight = match init {
            WeightInit::Gaussian { std } => Tensor::from_fn(&[dim, classes], |_| T::lit(rng.gaussian(0.0, std))),
            WeightInit::Xavier => {
                let b = (3.0 / dim as f64).sqrt();
                Tensor::from_fn(&[dim, classes], |_| T::lit((2.0 * rng.uniform() - 1.0) * b))
            }
        };
        Ok(LinearHead {
            weight,
            bias: Tensor::zeros(&[classes]),
        })
    }

    fn logits(&self, x: &Tensor<T>) -> Tensor<T> {
        let (k, d, c) = (x.rows(), self.weight.shape()[0], self.weight.shape()[1]);
        let mut out = Vec::with_capacity(k * c);
        for _ in 0..k {
            out.extend_from_slice(self.bias.data());
        }
        gemm_slices(k, d, c, T::one(), x.data(), Transpose::No, self.weight.data(), Transpose::No, T::one(), &mut out);
        Tensor::from_parts_unchecked(vec![k, c], out)
    }

    fn backward(&self, x: &Tensor<T>, g: &Tensor<T>) -> HeadGradients<T> {
        let (k, d, c) = (x.rows(), self.weight.shape()[0], self.weight.shape()[1]);
        let mut gw = Tensor::zeros(&[d, c]);
        gemm_slices(d, k, c, T::one(), x.data(), Transpose::Yes, g.data(), Transpose::No, T::zero(), gw.data_mut());
        let mut gb = Tensor::zeros(&[c]);
        for r in 0..k {
            for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                *acc += v;
            }
        }
        let mut gx = Tensor::zeros(&[k, d]);
        gemm_slices(k, c, d, T::one(), g.data(), Transpose::No, self.weight.data(), Transpose::Yes, T::zero(), gx.data_mut());
        HeadGradients {
            params: vec![gw, gb],
            features: gx,
        }
    }
}

/// Normalized-feature angular-margin classifier. Both features and class weight
/// rows are L2-normalized; logits are `δ cos θ_j`, except the target class of an
/// identity sample, which uses the margin function `ψ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularMarginHead<T> {
    /// `[classes, dim]`, one row per identity class.
    pub weight: Tensor<T>,
    pub config: AngularMarginConfig,
}

struct AngularCache {
    xhat: Vec<f64>,
    xnorm: Vec<f64>,
    what: Vec<f64>,
    wnorm: Vec<f64>,
    cos: Vec<f64>,
}

impl<T: Scalar> AngularMarginHead<T> {
    pub fn new(dim: usize, classes: usize, config: AngularMarginConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if dim == 0 || classes == 0 {
            bail!(Parameter, "head needs positive sizes");
        }
        let b = (3.0 / dim as f64).sqrt();
        Ok(AngularMarginHead {
            weight: Tensor::from_fn(&[classes, dim], |_| T::lit((2.0 * rng.uniform() - 1.0) * b)),
            config,
        })
    }

    fn cache(&self, x: &Tensor<T>) -> Result<AngularCache> {
        let (k, d, c) = (x.rows(), x.row_len(), self.weight.rows());
        let mut xhat = vec![0.0; k * d];
        let mut xnorm = vec![0.0; k];
        for i in 0..k {
            let n = norm(x.row(i)).as_f64();
            if n == 0.0 {
                bail!(Numeric, "feature row {i} has zero norm");
            }
            xnorm[i] = n;
            for (o, &v) in xhat[i * d..(i + 1) * d].iter_mut().zip(x.row(i)) {
                *o = v.as_f64() / n;
            }
        }
        let mut what = vec![0.0; c * d];
        let mut wnorm = vec![0.0; c];
        for j in 0..c {
            let n = norm(self.weight.row(j)).as_f64();
            if n == 0.0 {
                bail!(Numeric, "class weight row {j} has zero norm");
            }
            wnorm[j] = n;
            for (o, &v) in what[j * d..(j + 1) * d].iter_mut().zip(self.weight.row(j)) {
                *o = v.as_f64() / n;
            }
        }
        let mut cos = vec![0.0; k * c];
        gemm_slices(k, d, c, 1.0, &xhat, Transpose::No, &what, Transpose::Yes, 0.0, &mut cos);
        Ok(AngularCache {
            xhat,
            xnorm,
            what,
            wnorm,
            cos,
        })
    }

    /// Per-logit value and derivative w.r.t. the cosine.
    fn logit_and_slope(&self, cos: f64, is_target: bool) -> (f64, f64) {
        let AngularMarginConfig { delta, m, anneal } = self.config;
        if is_target {
            let (psi, dpsi) = margin_psi(cos, m);
            (delta * (psi + anneal * cos) / (1.0 + anneal), delta * (dpsi + anneal) / (1.0 + anneal))
        } else {
            (delta * cos, delta)
        }
    }

    fn target(labels: &[usize], sources: &[Source], i: usize) -> Option<usize> {
        (sources[i] == Source::Identity).then(|| labels[i])
    }

    fn logits(&self, x: &Tensor<T>, labels: &[usize], sources: &[Source]) -> Result<Tensor<T>> {
        let cache = self.cache(x)?;
        let (k, c) = (x.rows(), self.weight.rows());
        let mut out = Tensor::zeros(&[k, c]);
        for i in 0..k {
            let t = Self::target(labels, sources, i);
            for j in 0..c {
                out.data_mut()[i * c + j] = T::lit(self.logit_and_slope(cache.cos[i * c + j], t == Some(j)).0);
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor<T>, labels: &[usize], sources: &[Source], g: &Tensor<T>) -> Result<HeadGradients<T>> {
        let cache = self.cache(x)?;
        let (k, d, c) = (x.rows(), x.row_len(), self.weight.rows());
        // Gradient w.r.t. each cosine.
        let mut gc = vec![0.0; k * c];
        for i in 0..k {
            let t = Self::target(labels, sources, i);
            for j in 0..c {
                gc[i * c + j] = g.data()[i * c + j].as_f64() * self.logit_and_slope(cache.cos[i * c + j], t == Some(j)).1;
            }
        }
        // ∂cos_ij/∂x_i = (ŵ_j - cos_ij x̂_i)/|x_i|, ∂cos_ij/∂w_j = (x̂_i - cos_ij ŵ_j)/|w_j|.
        let mut gx = vec![0.0; k * d];
        gemm_slices(k, c, d, 1.0, &gc, Transpose::No, &cache.what, Transpose::No, 0.0, &mut gx);
        for i in 0..k {
            let s: f64 = (0..c).map(|j| gc[i * c + j] * cache.cos[i * c + j]).sum();
            for e in 0..d {
                gx[i * d + e] = (gx[i * d + e] - s * cache.xhat[i * d + e]) / cache.xnorm[i];
            }
        }
        let mut gw = vec![0.0; c * d];
        gemm_slices(c, k, d, 1.0, &gc, Transpose::Yes, &cache.xhat, Transpose::No, 0.0, &mut gw);
        for j in 0..c {
            let s: f64 = (0..k).map(|i| gc[i * c + j] * cache.cos[i * c + j]).sum();
            for e in 0..d {
                gw[j * d + e] = (gw[j * d + e] - s * cache.what[j * d + e]) / cache.wnorm[j];
            }
        }
        Ok(HeadGradients {
            params: vec![Tensor::from_fn(&[c, d], |i| T::lit(gw[i]))],
            features: Tensor::from_fn(&[k, d], |i| T::lit(gx[i])),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients<T> {
    /// In the order of [`ClassifierHead::params`].
    pub params: Vec<Tensor<T>>,
    pub features: Tensor<T>,
}

/// The classifier feeding the chief loss.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassifierHead<T> {
    Linear(LinearHead<T>),
    AngularMargin(AngularMarginHead<T>),
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierHead::Linear(h) => h.weight.shape()[1],
            ClassifierHead::AngularMargin(h) => h.weight.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ClassifierHead::Linear(h) => h.weight.shape()[0],
            ClassifierHead::AngularMargin(h) => h.weight.row_len(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            ClassifierHead::Linear(h) => vec![&h.weight, &h.bias],
            ClassifierHead::AngularMargin(h) => vec![&h.weight],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            ClassifierHead::Linear(h) => vec![&mut h.weight, &mut h.bias],
            ClassifierHead::AngularMargin(h) => vec![&mut h.weight],
        }
    }

    /// Sets the margin blending weight; no effect on a linear head.
    pub fn set_anneal(&mut self, anneal: f64) {
        if let ClassifierHead::AngularMargin(h) = self {
            h.config.anneal = anneal;
        }
    }

    fn check(&self, features: &Tensor<T>, labels: &[usize], sources: &[Source]) -> Result<()> {
        if features.ndim() != 2 || features.row_len() != self.dim() {
            bail!(Shape, "features {:?} do not match head width {}", features.shape(), self.dim());
        }
        if labels.len() != features.rows() || sources.len() != features.rows() {
            bail!(Shape, "labels/sources do not match {} feature rows", features.rows());
        }
        for (&y, &s) in labels.iter().zip(sources) {
            if s == Source::Identity && y >= self.num_classes() {
                bail!(Label, "identity label {y} outside {} classes", self.num_classes());
            }
        }
        Ok(())
    }

    /// Training logits; the angular head applies its margin to the target class of
    /// identity samples.
    pub fn forward(&self, features: &Tensor<T>, labels: &[usize], sources: &[Source]) -> Result<Tensor<T>> {
        self.check(features, labels, sources)?;
        let out = match self {
            ClassifierHead::Linear(h) => h.logits(features),
            ClassifierHead::AngularMargin(h) => h.logits(features, labels, sources)?,
        };
        out.ensure_finite("logits")?;
        Ok(out)
    }

    pub fn backward(
        &self,
        features: &Tensor<T>,
        labels: &[usize],
        sources: &[Source],
        grad_logits: &Tensor<T>,
    ) -> Result<HeadGradients<T>> {
        self.check(features, labels, sources)?;
        if grad_logits.shape() != [features.rows(), self.num_classes()] {
            bail!(Shape, "logit gradient shape {:?}", grad_logits.shape());
        }
        match self {
            ClassifierHead::Linear(h) => Ok(h.backward(features, grad_logits)),
            ClassifierHead::AngularMargin(h) => h.backward(features, labels, sources, grad_logits),
        }
    }

    /// Margin-free logits for prediction.
    pub fn scores(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let k = features.rows();
        self.forward(features, &vec![0; k], &vec![Source::Sequence; k])
    }

    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let s = self.scores(features)?;
        Ok((0..s.rows())
            .map(|r| {
                let row = s.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        match self {
            ClassifierHead::Linear(h) => {
                w.u8(0);
                write_tensor(&mut w, &h.weight);
                write_tensor(&mut w, &h.bias);
            }
            ClassifierHead::AngularMargin(h) => {
                w.u8(1);
                w.f64(h.config.delta);
                w.u32(h.config.m as usize);
                w.f64(h.config.anneal);
                write_tensor(&mut w, &h.weight);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let head = match r.u8()? {
            0 => {
                let weight: Tensor<T> = read_tensor(&mut r)?;
                let bias: Tensor<T> = read_tensor(&mut r)?;
                if weight.ndim() != 2 || bias.shape() != [weight.shape()[1]] {
                    bail!(Format, "linear head shapes {:?} / {:?}", weight.shape(), bias.shape());
                }
                ClassifierHead::Linear(LinearHead { weight, bias })
            }
            1 => {
                let config = AngularMarginConfig {
                    delta: r.f64()?,
                    m: r.u32()? as u32,
                    anneal: r.f64()?,
                };
                config.validate()?;
                let weight: Tensor<T> = read_tensor(&mut r)?;
                if weight.ndim() != 2 {
                    bail!(Format, "angular head weight shape {:?}", weight.shape());
                }
                ClassifierHead::AngularMargin(AngularMarginHead { weight, config })
            }
            tag => bail!(Format, "unknown head tag {tag}"),
        };
        r.finish()?;
        Ok(head)
    }
}
