//! Discriminative sequence-agent loss.
//!
//! Per sample `k` with label `y`:
//!
//! ```text
//! L_k = λ d(x_k, c_y) + (1 - λ) / (|cand_k| p) Σ_{n ∈ cand_k} b_n max(α d(x_k, c_y) - d(x_k, c_n) + β, 0)
//! ```
//!
//! and the batch loss is the mean of `L_k`. Identity samples compete against every
//! other center; sequence samples only against the identity centers. `b_n` are
//! independent Bernoulli(p) draws per (sample, candidate) pair. Centers are not
//! differentiated through; they move by [`dsa_center_update`].

use super::centers::norm;
use super::{CenterTable, DistanceMode, LossOutput};
use crate::datasets::{LabelSpace, Source};
use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsaConfig {
    /// Balance between the intra-class term and the inter-class hinge terms.
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Inclusion probability of each candidate center.
    pub p: f64,
    pub mode: DistanceMode,
}

impl Default for DsaConfig {
    fn default() -> Self {
        DsaConfig {
            lambda: 0.5,
            alpha: 2.0,
            beta: 1.0,
            p: 1.0,
            mode: DistanceMode::Euclidean,
        }
    }
}

impl DsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!(Parameter, "lambda must be in [0, 1], got {}", self.lambda);
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            bail!(Parameter, "alpha must be >= 1, got {}", self.alpha);
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bail!(Parameter, "beta must be >= 0, got {}", self.beta);
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            bail!(Parameter, "candidate probability must be in (0, 1], got {}", self.p);
        }
        Ok(())
    }
}

/// Distance between a feature and a center.
pub fn dsa_distance<T: Scalar>(x: &[T], c: &[T], mode: DistanceMode) -> Result<T> {
    Ok(dsa_distance_grad(x, c, mode)?.0)
}

/// Distance and its gradient w.r.t. `x`.
pub fn dsa_distance_grad<T: Scalar>(x: &[T], c: &[T], mode: DistanceMode) -> Result<(T, Vec<T>)> {
    if x.len() != c.len() {
        bail!(Shape, "feature length {} vs center length {}", x.len(), c.len());
    }
    let half = T::lit(0.5);
    match mode {
        DistanceMode::Euclidean => {
            let diff: Vec<T> = x.iter().zip(c).map(|(&a, &b)| a - b).collect();
            let d = diff.iter().map(|&v| v * v).sum::<T>() * T::lit(0.25);
            Ok((d, diff.into_iter().map(|v| v * half).collect()))
        }
        DistanceMode::Angular => {
            let (nx, nc) = (norm(x), norm(c));
            if nx == T::zero() || nc == T::zero() {
                bail!(Numeric, "angular distance needs nonzero vectors");
            }
            let cos = x.iter().zip(c).map(|(&a, &b)| a * b).sum::<T>() / (nx * nc);
            // d = (1 - cos)/2, ∂cos/∂x = (ĉ - cos x̂) / |x|.
            let grad = x
                .iter()
                .zip(c)
                .map(|(&a, &b)| -half * (b / nc - cos * a / nx) / nx)
                .collect();
            Ok(((T::one() - cos) * half, grad))
        }
    }
}

/// The per-pair term: the distance itself for the target center, a hinge otherwise.
pub fn dsa_pair_loss(d_intra: f64, d_n: f64, cfg: &DsaConfig, is_target: bool) -> f64 {
    if is_target {
        d_intra
    } else {
        (cfg.alpha * d_intra - d_n + cfg.beta).max(0.0)
    }
}

/// Candidate centers that take part in one evaluation of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMask {
    /// Included candidates per sample.
    pub included: Vec<Vec<usize>>,
    /// Size of the full candidate set per sample.
    pub candidate_counts: Vec<usize>,
    pub p: f64,
}

fn candidates(label: usize, source: Source, space: LabelSpace) -> impl Iterator<Item = usize> {
    let end = match source {
        Source::Identity => space.total(),
        Source::Sequence => space.num_identities(),
    };
    (0..end).filter(move |&n| n != label)
}

/// Draws the Bernoulli(p) inclusion of every (sample, candidate) pair. With
/// `p = 1` every candidate is included and no random numbers are consumed.
pub fn sample_candidates(
    labels: &[usize],
    sources: &[Source],
    space: LabelSpace,
    p: f64,
    rng: &mut Rng,
) -> Result<CandidateMask> {
    if labels.len() != sources.len() {
        bail!(Shape, "{} labels and {} sources", labels.len(), sources.len());
    }
    if !(p > 0.0 && p <= 1.0) {
        bail!(Parameter, "candidate probability must be in (0, 1], got {p}");
    }
    let mut included = Vec::with_capacity(labels.len());
    let mut counts = Vec::with_capacity(labels.len());
    for (&y, &s) in labels.iter().zip(sources) {
        space.check(y, s)?;
        let mut count = 0;
        let mut picked = Vec::new();
        for n in candidates(y, s, space) {
            count += 1;
            if p >= 1.0 || rng.bernoulli(p)? {
                picked.push(n);
            }
        }
        if count == 0 {
            bail!(Configuration, "sample with label {y} has no candidate centers (only one center exists)");
        }
        included.push(picked);
        counts.push(count);
    }
    Ok(CandidateMask {
        included,
        candidate_counts: counts,
        p,
    })
}

/// Evaluates the loss and its feature gradient for a fixed candidate mask.
pub fn dsa_loss_with_mask<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    centers: &CenterTable<T>,
    cfg: &DsaConfig,
    mask: &CandidateMask,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    centers.check_labels(features, labels)?;
    let k = features.rows();
    if mask.included.len() != k || mask.candidate_counts.len() != k {
        bail!(Shape, "candidate mask covers {} samples, batch has {k}", mask.included.len());
    }
    let mode = cfg.mode;
    let (lambda, alpha, beta) = (T::lit(cfg.lambda), T::lit(cfg.alpha), T::lit(cfg.beta));
    let inv_k = T::one() / T::from_usize_lossy(k.max(1));
    let mut grad = Tensor::zeros(features.shape());
    let mut total = T::zero();
    for i in 0..k {
        let x = features.row(i);
        let y = labels[i];
        let (d_y, g_y) = dsa_distance_grad(x, centers.center(y), mode)?;
        let weight = (T::one() - lambda) / T::lit(mask.candidate_counts[i] as f64 * mask.p);
        let mut loss_i = lambda * d_y;
        let mut coeff_y = lambda;
        let g = grad.row_mut(i);
        for &n in &mask.included[i] {
            if n == y || n >= centers.num_centers() {
                bail!(Consistency, "candidate {n} invalid for label {y}");
            }
            let (d_n, g_n) = dsa_distance_grad(x, centers.center(n), mode)?;
            let hinge = alpha * d_y - d_n + beta;
            if hinge > T::zero() {
                loss_i += weight * hinge;
                coeff_y += weight * alpha;
                for (gv, &v) in g.iter_mut().zip(&g_n) {
                    *gv -= weight * v * inv_k;
                }
            }
        }
        for (gv, &v) in g.iter_mut().zip(&g_y) {
            *gv += coeff_y * v * inv_k;
        }
        total += loss_i;
    }
    Ok(LossOutput { loss: total * inv_k, grad })
}

/// Samples a candidate mask from `rng` and evaluates the loss.
pub fn dsa_loss<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    sources: &[Source],
    space: LabelSpace,
    centers: &CenterTable<T>,
    cfg: &DsaConfig,
    rng: &mut Rng,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    if centers.num_centers() != space.total() {
        bail!(
            Consistency,
            "{} centers for a label space of {}",
            centers.num_centers(),
            space.total()
        );
    }
    let mask = sample_candidates(labels, sources, space, cfg.p, rng)?;
    dsa_loss_with_mask(features, labels, centers, cfg, &mask)
}

/// Moves each center toward its batch members:
/// `c_n += γ Σ_{y_k = n} (x_k - c_n) / 2 / (1 + n_n)`. Centers without batch members
/// stay put; angular tables target normalized features and renormalize.
pub fn dsa_center_update<T: Scalar>(features: &Tensor<T>, labels: &[usize], centers: &mut CenterTable<T>) -> Result<()> {
    centers.attract(features, labels, 0.5)
}
