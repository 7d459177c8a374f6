use super::LossOutput;
use crate::datasets::Source;
use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// `log p(i)` for one row via log-sum-exp.
fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Cross-entropy against a smoothed target, averaged over the batch.
///
/// Identity samples (`Z = 0`) use a one-hot target on `labels[k]`; sequence samples
/// (`Z = 1`) use the uniform target `1/C` over the `C` logits, so their loss is
/// `-(1/C) Σ log p(i)`. The gradient w.r.t. the logits is `(p - q) / K`.
pub fn lsr_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], sources: &[Source]) -> Result<LossOutput<T>> {
    smoothed_cross_entropy(logits, labels, sources, true)
}

/// Plain softmax cross-entropy over identity samples. Any sequence samples in the
/// batch are skipped and the mean is taken over identity samples only.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], sources: &[Source]) -> Result<LossOutput<T>> {
    smoothed_cross_entropy(logits, labels, sources, false)
}

fn smoothed_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    sources: &[Source],
    smooth: bool,
) -> Result<LossOutput<T>> {
    if logits.ndim() != 2 {
        bail!(Shape, "logits must be [batch, classes], got {:?}", logits.shape());
    }
    let (k, c) = (logits.rows(), logits.row_len());
    if labels.len() != k || sources.len() != k {
        bail!(Shape, "{} labels and {} sources for {k} logit rows", labels.len(), sources.len());
    }
    if c == 0 {
        bail!(Shape, "logits have no classes");
    }
    let used = sources.iter().filter(|&&s| smooth || s == Source::Identity).count();
    let mut grad = Tensor::zeros(logits.shape());
    if used == 0 {
        return Ok(LossOutput {
            loss: T::zero(),
            grad,
        });
    }
    let scale = T::one() / T::from_usize_lossy(used);
    let uniform = T::one() / T::from_usize_lossy(c);
    let mut logp = vec![T::zero(); c];
    let mut total = T::zero();
    for i in 0..k {
        let row = logits.row(i);
        let g = grad.row_mut(i);
        match sources[i] {
            Source::Identity => {
                let y = labels[i];
                if y >= c {
                    bail!(Label, "identity label {y} outside {c} classes");
                }
                log_softmax_row(row, &mut logp);
                total -= logp[y];
                for (j, (gj, &lp)) in g.iter_mut().zip(&logp).enumerate() {
                    let q = if j == y { T::one() } else { T::zero() };
                    *gj = (lp.exp() - q) * scale;
                }
            }
            Source::Sequence if smooth => {
                log_softmax_row(row, &mut logp);
                total -= logp.iter().copied().sum::<T>() * uniform;
                for (gj, &lp) in g.iter_mut().zip(&logp) {
                    *gj = (lp.exp() - uniform) * scale;
                }
            }
            Source::Sequence => {}
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
    })
}
