use std::fmt::Write as _;

use super::cosine_similarity;
use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Two samples and whether they share a ground-truth class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationPair {
    pub index_a: usize,
    pub index_b: usize,
    pub same: bool,
}

/// Seed of the shuffle that assigns pairs to folds.
pub const VERIFICATION_SHUFFLE_SEED: u64 = 0x5eed_f01d;

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult {
    /// Mean held-out accuracy over the folds.
    pub accuracy: f64,
    /// Mean of the per-fold thresholds.
    pub threshold: f64,
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
    pub pairs: usize,
}

impl VerificationResult {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "verification: {} pairs, {} folds, accuracy {:.4}, threshold {:.4}",
            self.pairs,
            self.fold_accuracies.len(),
            self.accuracy,
            self.threshold
        );
        for (i, (a, t)) in self.fold_accuracies.iter().zip(&self.fold_thresholds).enumerate() {
            let _ = writeln!(s, "  fold {i}: accuracy {a:.4} threshold {t:.4}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,accuracy,threshold\n");
        for (i, (a, t)) in self.fold_accuracies.iter().zip(&self.fold_thresholds).enumerate() {
            let _ = writeln!(s, "{i},{a},{t}");
        }
        let _ = writeln!(s, "mean,{},{}", self.accuracy, self.threshold);
        s
    }
}

/// Draws `count` pairs, half with matching true classes and half without.
/// Same-class pairs pick a first sample from a class with at least two members
/// and a distinct partner from that class; different-class pairs are rejection
/// sampled.
pub fn make_pairs(true_classes: &[usize], count: usize, rng: &mut Rng) -> Result<Vec<VerificationPair>> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in true_classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let pairable: Vec<usize> = (0..true_classes.len()).filter(|&i| by_class[&true_classes[i]].len() >= 2).collect();
    let n_same = count / 2;
    let n_diff = count - n_same;
    if n_same > 0 && pairable.is_empty() {
        bail!(Parameter, "no class has two samples, cannot form same-class pairs");
    }
    if n_diff > 0 && by_class.len() < 2 {
        bail!(Parameter, "a single class cannot form different-class pairs");
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..n_same {
        let a = pairable[rng.below(pairable.len())];
        let mates = &by_class[&true_classes[a]];
        let b = loop {
            let b = mates[rng.below(mates.len())];
            if b != a {
                break b;
            }
        };
        pairs.push(VerificationPair {
            index_a: a,
            index_b: b,
            same: true,
        });
    }
    for _ in 0..n_diff {
        let a = rng.below(true_classes.len());
        let b = loop {
            let b = rng.below(true_classes.len());
            if true_classes[b] != true_classes[a] {
                break b;
            }
        };
        pairs.push(VerificationPair {
            index_a: a,
            index_b: b,
            same: false,
        });
    }
    Ok(pairs)
}

pub fn pair_similarities<T: Scalar>(features: &Tensor<T>, pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    if features.ndim() != 2 {
        bail!(Shape, "features must be [samples, dim], got {:?}", features.shape());
    }
    pairs
        .iter()
        .map(|p| {
            if p.index_a == p.index_b {
                bail!(Parameter, "pair compares sample {} with itself", p.index_a);
            }
            if p.index_a.max(p.index_b) >= features.rows() {
                bail!(Shape, "pair ({}, {}) outside {} samples", p.index_a, p.index_b, features.rows());
            }
            cosine_similarity(features.row(p.index_a), features.row(p.index_b))
        })
        .collect()
}

/// Threshold maximizing accuracy when pairs with similarity `> t` are called
/// the same. Candidates are the midpoints between consecutive distinct values
/// plus one below the minimum and one above the maximum; ties go to the lower
/// threshold. Returns `(threshold, accuracy)`.
pub fn best_threshold(sims: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    if sims.len() != same.len() || sims.is_empty() {
        bail!(Parameter, "need matching, non-empty similarity and truth lists");
    }
    if sims.iter().any(|s| !s.is_finite()) {
        bail!(Numeric, "non-finite similarity");
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]));
    let total_same = same.iter().filter(|&&s| s).count();
    // Threshold below everything: every pair called the same.
    let mut correct = total_same;
    let mut best = (sims[order[0]] - 1.0, correct);
    let mut i = 0;
    while i < order.len() {
        let v = sims[order[i]];
        while i < order.len() && sims[order[i]] == v {
            // Pair now falls at or below the threshold and is called different.
            if same[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = if i < order.len() { 0.5 * (v + sims[order[i]]) } else { v + 1.0 };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    Ok((best.0, best.1 as f64 / sims.len() as f64))
}

/// K-fold verification: each fold is scored with the threshold chosen on the
/// other folds. Pairs are assigned to folds after a fixed-seed shuffle.
pub fn verification_accuracy<T: Scalar>(
    features: &Tensor<T>,
    pairs: &[VerificationPair],
    folds: usize,
) -> Result<VerificationResult> {
    if folds < 2 {
        bail!(Parameter, "verification needs at least 2 folds, got {folds}");
    }
    if pairs.len() < folds {
        bail!(Parameter, "{} pairs cannot fill {folds} folds", pairs.len());
    }
    let sims = pair_similarities(features, pairs)?;
    let n = pairs.len();
    let order = Rng::new(VERIFICATION_SHUFFLE_SEED).permutation(n);
    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut fold_thresholds = Vec::with_capacity(folds);
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let (mut tr_s, mut tr_y) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos < lo || pos >= hi {
                tr_s.push(sims[i]);
                tr_y.push(pairs[i].same);
            }
        }
        let (t, _) = best_threshold(&tr_s, &tr_y)?;
        let held = &order[lo..hi];
        let hits = held.iter().filter(|&&i| (sims[i] > t) == pairs[i].same).count();
        fold_accuracies.push(hits as f64 / held.len() as f64);
        fold_thresholds.push(t);
    }
    Ok(VerificationResult {
        accuracy: fold_accuracies.iter().sum::<f64>() / folds as f64,
        threshold: fold_thresholds.iter().sum::<f64>() / folds as f64,
        fold_accuracies,
        fold_thresholds,
        pairs: n,
    })
}
