use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Separation statistics of labelled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    /// Class ids in ascending order; rows of `means` follow this order.
    pub classes: Vec<usize>,
    pub counts: Vec<usize>,
    pub means: Tensor<f64>,
    /// Mean squared distance to the class mean, per class.
    pub variances: Vec<f64>,
    /// Unweighted average of `variances`.
    pub mean_intra_variance: f64,
    pub min_inter_distance: f64,
    /// `min_inter_distance² / mean_intra_variance`, or `+inf` when the variance is 0.
    pub fisher_ratio: f64,
}

impl ClusterReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "clusters: {} classes, mean intra-class variance {:.6}, min inter-centroid distance {:.6}, fisher ratio {:.6}",
            self.classes.len(),
            self.mean_intra_variance,
            self.min_inter_distance,
            self.fisher_ratio
        );
        s
    }

    /// One row per class, then a summary row.
    pub fn to_csv(&self) -> String {
        let dim = self.means.row_len();
        let mut s = String::from("class,count");
        for d in 0..dim {
            let _ = write!(s, ",mean_{d}");
        }
        s.push_str(",variance\n");
        for (i, &c) in self.classes.iter().enumerate() {
            let _ = write!(s, "{c},{}", self.counts[i]);
            for v in self.means.row(i) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", self.variances[i]);
        }
        let _ = writeln!(
            s,
            "# mean_intra_variance={},min_inter_distance={},fisher_ratio={}",
            self.mean_intra_variance, self.min_inter_distance, self.fisher_ratio
        );
        s
    }
}

/// Class means, intra-class variances and the closest pair of class means.
/// A class with one sample contributes variance 0.
pub fn cluster_report<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<ClusterReport> {
    if features.ndim() != 2 || features.rows() != labels.len() {
        bail!(Shape, "features {:?} with {} labels", features.shape(), labels.len());
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    if members.len() < 2 {
        bail!(Parameter, "cluster statistics need at least 2 classes, got {}", members.len());
    }
    let dim = features.row_len();
    let mut means = Vec::with_capacity(members.len() * dim);
    let mut variances = Vec::with_capacity(members.len());
    for idx in members.values() {
        let mut mean = vec![0.0; dim];
        for &i in idx {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        let var = idx
            .iter()
            .map(|&i| {
                features.row(i).iter().zip(&mean).map(|(&v, m)| (v.as_f64() - m).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / idx.len() as f64;
        means.extend(mean);
        variances.push(var);
    }
    let k = members.len();
    let mut min_inter = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d2: f64 = (0..dim).map(|j| (means[a * dim + j] - means[b * dim + j]).powi(2)).sum();
            min_inter = min_inter.min(d2.sqrt());
        }
    }
    let mean_var = variances.iter().sum::<f64>() / k as f64;
    let fisher = if mean_var > 0.0 { min_inter * min_inter / mean_var } else { f64::INFINITY };
    Ok(ClusterReport {
        classes: members.keys().copied().collect(),
        counts: members.values().map(Vec::len).collect(),
        means: Tensor::from_vec(&[k, dim], means)?,
        variances,
        mean_intra_variance: mean_var,
        min_inter_distance: min_inter,
        fisher_ratio: fisher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn point_clusters_have_infinite_ratio() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let r = cluster_report(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.min_inter_distance, 2.0);
        assert_eq!(r.mean_intra_variance, 0.0);
        assert_eq!(r.fisher_ratio, f64::INFINITY);
    }

    #[test]
    fn identical_features_have_zero_separation() {
        let f = Tensor::full(&[6, 3], 1.5f64);
        let r = cluster_report(&f, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(r.min_inter_distance, 0.0);
        assert!(r.means.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_sample_class_has_zero_variance() {
        let f = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![5.0]]).unwrap();
        let r = cluster_report(&f, &[0, 0, 1]).unwrap();
        assert_eq!(r.variances, vec![1.0, 0.0]);
        assert_eq!(r.mean_intra_variance, 0.5);
        assert_eq!(r.fisher_ratio, 16.0 / 0.5);
        assert!(cluster_report(&f, &[0, 0, 0]).is_err());
    }

    #[test]
    fn gaussian_clusters_match_direct_formula() {
        let mut rng = Rng::new(12);
        let labels: Vec<usize> = (0..90).map(|i| (i * 7) % 3).collect();
        let centers = [[0.0, 0.0], [3.0, 1.0], [-1.0, 4.0]];
        let f = Tensor::from_fn(&[90, 2], |i| centers[labels[i / 2]][i % 2] + 0.5 * rng.normal());
        let r = cluster_report(&f, &labels).unwrap();

        let mut mus = [[0.0f64; 2]; 3];
        let mut n = [0usize; 3];
        for (i, &y) in labels.iter().enumerate() {
            n[y] += 1;
            mus[y][0] += f.at(i, 0);
            mus[y][1] += f.at(i, 1);
        }
        for y in 0..3 {
            mus[y][0] /= n[y] as f64;
            mus[y][1] /= n[y] as f64;
        }
        let mut var = [0.0f64; 3];
        for (i, &y) in labels.iter().enumerate() {
            var[y] += ((f.at(i, 0) - mus[y][0]).powi(2) + (f.at(i, 1) - mus[y][1]).powi(2)) / n[y] as f64;
        }
        let dist = |a: usize, b: usize| ((mus[a][0] - mus[b][0]).powi(2) + (mus[a][1] - mus[b][1]).powi(2)).sqrt();
        let min_d = dist(0, 1).min(dist(0, 2)).min(dist(1, 2));
        let mean_var = (var[0] + var[1] + var[2]) / 3.0;
        assert!((r.min_inter_distance - min_d).abs() < 1e-12);
        assert!((r.mean_intra_variance - mean_var).abs() < 1e-12);
        assert!((r.fisher_ratio - min_d * min_d / mean_var).abs() < 1e-9);
        let csv = r.to_csv();
        assert!(csv.starts_with("class,count,mean_0,mean_1,variance\n0,30,"));
    }

    proptest! {
        #[test]
        fn spreading_clusters_apart_raises_ratio(seed in 0u64..300, push in 1.05f64..3.0) {
            let mut rng = Rng::new(seed);
            let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
            let dirs: Vec<[f64; 2]> = (0..4).map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_2 + 0.3 * rng.uniform();
                [a.cos(), a.sin()]
            }).collect();
            let noise: Vec<f64> = (0..80).map(|_| 0.3 * rng.normal()).collect();
            let build = |r: f64| Tensor::from_fn(&[40, 2], |i| r * dirs[labels[i / 2]][i % 2] + noise[i]);
            let near = cluster_report(&build(2.0), &labels).unwrap();
            let far = cluster_report(&build(2.0 * push), &labels).unwrap();
            prop_assert!(far.fisher_ratio > near.fisher_ratio);
            prop_assert!((far.mean_intra_variance - near.mean_intra_variance).abs() < 1e-9);
        }
    }
}
