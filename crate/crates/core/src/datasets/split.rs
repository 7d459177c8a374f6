use super::{Dataset, LabelSpace, Source};
use crate::error::{bail, Result};
use crate::numerics::Rng;
use crate::scalar::Scalar;

/// Splits a labelled dataset into identity data and sequence data.
///
/// A random `identity_class_count` of the ground-truth classes keep identity
/// labels `0..C` (ordered by original class id). Every other class is shuffled and
/// cut into contiguous runs whose lengths are drawn uniformly from
/// `[min_seq_len, max_seq_len]`; each run becomes one sequence class. The final run
/// of a class takes whatever remains and may be shorter than `min_seq_len`.
///
/// Output order: identity samples (original order), then sequences in label order.
/// True classes keep the original ids on both sides.
pub fn split_identity_sequence<T: Scalar>(
    data: &Dataset<T>,
    rng: &mut Rng,
    identity_class_count: usize,
    min_seq_len: usize,
    max_seq_len: usize,
) -> Result<Dataset<T>> {
    let classes = data.distinct_true_classes();
    if identity_class_count == 0 || identity_class_count >= classes.len() {
        bail!(
            Parameter,
            "identity class count {identity_class_count} must be in 1..{}",
            classes.len()
        );
    }
    if min_seq_len == 0 || min_seq_len > max_seq_len {
        bail!(
            Parameter,
            "sequence lengths need 1 <= min ({min_seq_len}) <= max ({max_seq_len})"
        );
    }

    let mut shuffled = classes.clone();
    rng.shuffle(&mut shuffled);
    let mut identity: Vec<usize> = shuffled[..identity_class_count].to_vec();
    identity.sort_unstable();
    let held_out: Vec<usize> = classes.iter().copied().filter(|c| !identity.contains(c)).collect();

    let truth = data.true_classes();
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for &class in &held_out {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| truth[i] == class).collect();
        rng.shuffle(&mut members);
        let mut rest = members.as_slice();
        while !rest.is_empty() {
            let len = min_seq_len + rng.below(max_seq_len - min_seq_len + 1);
            let (run, tail) = rest.split_at(len.min(rest.len()));
            runs.push(run.to_vec());
            rest = tail;
        }
    }

    let space = LabelSpace::new(identity_class_count, runs.len())?;
    let mut out = Dataset::empty(data.sample_shape(), space);
    let shape = data.sample_shape().to_vec();
    for i in 0..data.len() {
        if let Ok(pos) = identity.binary_search(&truth[i]) {
            out.push_raw(data.image(i), &shape, pos, Source::Identity, truth[i])?;
        }
    }
    for (s, run) in runs.iter().enumerate() {
        for &i in run {
            out.push_raw(
                data.image(i),
                &shape,
                identity_class_count + s,
                Source::Sequence,
                truth[i],
            )?;
        }
    }
    Ok(out)
}
