//! Identity and sequence training data under one label space.
//!
//! Labels `0..C` are identity classes, labels `C..N` are sequence classes. Every
//! sample also carries the ground-truth class it was drawn from, which the split
//! keeps so verification can be scored against true identities.

mod batches;
mod container;
mod idx;
mod split;
mod synthetic;

use std::collections::BTreeMap;

pub use batches::{iterate_batches, BatchCursor, BatchIter, BatchPlan, SampleBatch};
pub use container::{
    container_bytes, parse_container, read_container, write_container, CONTAINER_MAGIC,
    CONTAINER_VERSION,
};
pub use idx::{idx_bytes, load_idx, parse_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use split::split_identity_sequence;
pub use synthetic::make_synthetic_clusters;

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Which training set a sample came from (the `Z` flag).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Identity,
    Sequence,
}

impl Source {
    pub fn z(self) -> u8 {
        match self {
            Source::Identity => 0,
            Source::Sequence => 1,
        }
    }

    pub fn from_z(z: u8) -> Result<Self> {
        match z {
            0 => Ok(Source::Identity),
            1 => Ok(Source::Sequence),
            other => bail!(Format, "source flag must be 0 or 1, got {other}"),
        }
    }
}

/// `C` identity classes followed by `N - C` sequence classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    num_identities: usize,
    num_sequences: usize,
}

impl LabelSpace {
    pub fn new(num_identities: usize, num_sequences: usize) -> Result<Self> {
        if num_identities == 0 {
            bail!(Parameter, "label space needs at least one identity class");
        }
        Ok(LabelSpace {
            num_identities,
            num_sequences,
        })
    }

    /// `C`.
    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn num_sequences(&self) -> usize {
        self.num_sequences
    }

    /// `N`.
    pub fn total(&self) -> usize {
        self.num_identities + self.num_sequences
    }

    pub fn source_of(&self, label: usize) -> Result<Source> {
        if label < self.num_identities {
            Ok(Source::Identity)
        } else if label < self.total() {
            Ok(Source::Sequence)
        } else {
            bail!(Label, "label {label} outside label space of {} classes", self.total())
        }
    }

    /// Checks that `label` lies on the side of the space that `source` claims.
    pub fn check(&self, label: usize, source: Source) -> Result<()> {
        let actual = self.source_of(label)?;
        if actual != source {
            bail!(
                Label,
                "label {label} is a {actual:?} class but the sample is tagged {source:?}"
            );
        }
        Ok(())
    }
}

/// One owned sample, used when assembling datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: usize,
    pub source: Source,
    /// Underlying ground-truth class, in the id space of the original data.
    pub true_class: usize,
}

/// Borrowed view of a stored sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef<'a, T> {
    pub image: &'a [T],
    pub label: usize,
    pub source: Source,
    pub true_class: usize,
}

/// Immutable collection of equally shaped samples stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    sample_shape: Vec<usize>,
    images: Vec<T>,
    labels: Vec<usize>,
    sources: Vec<Source>,
    true_classes: Vec<usize>,
    label_space: LabelSpace,
}

impl<T: Scalar> Dataset<T> {
    pub fn empty(sample_shape: &[usize], label_space: LabelSpace) -> Self {
        Dataset {
            sample_shape: sample_shape.to_vec(),
            images: Vec::new(),
            labels: Vec::new(),
            sources: Vec::new(),
            true_classes: Vec::new(),
            label_space,
        }
    }

    pub fn from_samples(
        sample_shape: &[usize],
        label_space: LabelSpace,
        samples: impl IntoIterator<Item = Sample<T>>,
    ) -> Result<Self> {
        let mut ds = Self::empty(sample_shape, label_space);
        for s in samples {
            ds.push_raw(s.image.data(), s.image.shape(), s.label, s.source, s.true_class)?;
        }
        Ok(ds)
    }

    pub(crate) fn push_raw(
        &mut self,
        image: &[T],
        shape: &[usize],
        label: usize,
        source: Source,
        true_class: usize,
    ) -> Result<()> {
        if shape != self.sample_shape.as_slice() {
            bail!(
                Shape,
                "sample shape {shape:?} differs from dataset shape {:?}",
                self.sample_shape
            );
        }
        self.label_space.check(label, source)?;
        if image.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "sample image contains non-finite values");
        }
        self.images.extend_from_slice(image);
        self.labels.push(label);
        self.sources.push(source);
        self.true_classes.push(true_class);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn true_classes(&self) -> &[usize] {
        &self.true_classes
    }

    pub fn image(&self, i: usize) -> &[T] {
        let w = self.sample_len();
        &self.images[i * w..(i + 1) * w]
    }

    pub fn sample(&self, i: usize) -> SampleRef<'_, T> {
        SampleRef {
            image: self.image(i),
            label: self.labels[i],
            source: self.sources[i],
            true_class: self.true_classes[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleRef<'_, T>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    pub fn has_sequences(&self) -> bool {
        self.sources.contains(&Source::Sequence)
    }

    /// Indices of samples from one source, in storage order.
    pub fn indices_of(&self, source: Source) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sources[i] == source).collect()
    }

    /// Images of the listed samples stacked into `[len, sample_shape..]`.
    pub fn gather_images(&self, indices: &[usize]) -> Tensor<T> {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::from_parts_unchecked(shape, data)
    }

    pub fn gather(&self, indices: &[usize]) -> SampleBatch<T> {
        SampleBatch {
            images: self.gather_images(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
            true_classes: indices.iter().map(|&i| self.true_classes[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// New dataset holding the listed samples (same label space).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let w = self.sample_len();
        let mut out = Self::empty(&self.sample_shape, self.label_space);
        for &i in indices {
            out.images.extend_from_slice(&self.images[i * w..(i + 1) * w]);
            out.labels.push(self.labels[i]);
            out.sources.push(self.sources[i]);
            out.true_classes.push(self.true_classes[i]);
        }
        out
    }

    /// The identity samples alone, in a label space without sequences.
    pub fn identity_only(&self) -> Self {
        let mut out = self.subset(&self.indices_of(Source::Identity));
        out.label_space = LabelSpace {
            num_sequences: 0,
            ..self.label_space
        };
        out
    }

    /// Distinct ground-truth classes, ascending.
    pub fn distinct_true_classes(&self) -> Vec<usize> {
        let mut c = self.true_classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Number of samples in each sequence class, keyed by label.
    pub fn sequence_lengths(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for (&l, &s) in self.labels.iter().zip(&self.sources) {
            if s == Source::Sequence {
                *out.entry(l).or_insert(0) += 1;
            }
        }
        out
    }

    /// Histogram of sequence lengths: length -> number of sequences.
    pub fn sequence_length_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for len in self.sequence_lengths().into_values() {
            *hist.entry(len).or_insert(0) += 1;
        }
        hist
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            sample_shape: self.sample_shape.clone(),
            images: self.images.iter().map(|v| U::lit(v.as_f64())).collect(),
            labels: self.labels.clone(),
            sources: self.sources.clone(),
            true_classes: self.true_classes.clone(),
            label_space: self.label_space,
        }
    }

    pub(crate) fn raw_images(&self) -> &[T] {
        &self.images
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_space_sides() {
        let ls = LabelSpace::new(3, 2).unwrap();
        assert_eq!(ls.total(), 5);
        assert_eq!(ls.source_of(2).unwrap(), Source::Identity);
        assert_eq!(ls.source_of(3).unwrap(), Source::Sequence);
        assert!(ls.source_of(5).is_err());
        assert!(ls.check(1, Source::Sequence).is_err());
        assert!(LabelSpace::new(0, 4).is_err());
    }

    #[test]
    fn rejects_inconsistent_samples() {
        let ls = LabelSpace::new(2, 1).unwrap();
        let img = Tensor::<f64>::zeros(&[2]);
        let bad = Sample {
            image: img.clone(),
            label: 2,
            source: Source::Identity,
            true_class: 2,
        };
        assert!(Dataset::from_samples(&[2], ls, [bad]).is_err());
        let wrong_shape = Sample {
            image: Tensor::<f64>::zeros(&[3]),
            label: 0,
            source: Source::Identity,
            true_class: 0,
        };
        assert!(Dataset::from_samples(&[2], ls, [wrong_shape]).is_err());
        let ok = Sample {
            image: img,
            label: 2,
            source: Source::Sequence,
            true_class: 7,
        };
        let ds = Dataset::from_samples(&[2], ls, [ok]).unwrap();
        assert_eq!(ds.sequence_length_histogram().get(&1), Some(&1));
    }

    #[test]
    fn identity_only_drops_sequences() {
        let ls = LabelSpace::new(2, 2).unwrap();
        let samples = [(0, Source::Identity), (2, Source::Sequence), (1, Source::Identity), (3, Source::Sequence)]
            .map(|(label, source)| Sample {
                image: Tensor::full(&[1], label as f64),
                label,
                source,
                true_class: label + 10,
            });
        let ds = Dataset::from_samples(&[1], ls, samples).unwrap();
        let ids = ds.identity_only();
        assert_eq!(ids.label_space(), LabelSpace::new(2, 0).unwrap());
        assert_eq!(ids.labels(), [0, 1]);
        assert_eq!(ids.true_classes(), [10, 11]);
        assert_eq!(ids.image(1), [1.0]);
        assert!(!ids.has_sequences());
    }
}
