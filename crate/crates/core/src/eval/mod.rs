//! Measures how discriminative learned features are: verification accuracy over
//! cosine similarity, cluster separation, classification accuracy and 2-D
//! scatter plots.

mod cluster;
mod scatter;
mod verification;

pub use cluster::{cluster_report, ClusterReport};
pub use scatter::{export_scatter, scatter_svg, PALETTE};
pub use verification::{
    best_threshold, make_pairs, pair_similarities, verification_accuracy, VerificationPair, VerificationResult,
    VERIFICATION_SHUFFLE_SEED,
};

use crate::datasets::Dataset;
use crate::error::{bail, Result};
use crate::losses::ClassifierHead;
use crate::network::EmbeddingModel;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Samples per forward pass when embedding a dataset.
const EMBED_CHUNK: usize = 256;

/// One embedding row per sample, in dataset order.
pub fn embed_dataset<T: Scalar>(model: &EmbeddingModel<T>, data: &Dataset<T>) -> Result<Tensor<T>> {
    if data.sample_len() != model.input_len() {
        bail!(
            Dimension,
            "samples of shape {:?} do not fit model input {:?}",
            data.sample_shape(),
            model.input_shape()
        );
    }
    let dim = model.embedding_dim();
    let mut out = Vec::with_capacity(data.len() * dim);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EMBED_CHUNK) {
        let feats = model.infer(&data.gather_images(chunk))?;
        out.extend_from_slice(feats.data());
    }
    Tensor::from_vec(&[data.len(), dim], out)
}

/// `a·b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Shape, "vectors of length {} and {}", a.len(), b.len());
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        bail!(Numeric, "cosine similarity of a zero vector");
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Fraction of predictions equal to their labels.
pub fn classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        bail!(Shape, "{} predictions for {} labels", predictions.len(), labels.len());
    }
    if labels.is_empty() {
        bail!(Parameter, "accuracy of an empty set");
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of `head` on the identity samples of `data`, scored against their labels.
pub fn test_accuracy<T: Scalar>(model: &EmbeddingModel<T>, head: &ClassifierHead<T>, data: &Dataset<T>) -> Result<f64> {
    let feats = embed_dataset(model, data)?;
    let predictions = head.predict(&feats)?;
    classification_accuracy(&predictions, data.labels())
}
