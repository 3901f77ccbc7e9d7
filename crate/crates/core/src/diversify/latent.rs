// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pseudo domain labels: joint domain-class labels, soft centroid
//! initialization, nearest-centroid assignment and the hard refinement pass.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatentError {
    #[error("label out of range: class {class} of {classes}, domain {domain} of {domains}")]
    LabelOutOfRange { class: u32, classes: usize, domain: usize, domains: usize },
    #[error("soft weights of latent domain {domain} sum to {total:e}")]
    DegenerateWeights { domain: usize, total: f64 },
    #[error("embeddings and weights disagree: {0}")]
    Shape(String),
}

/// `s = d·C + y` for 1-based class `y` and 0-based domain `d`; `s ∈ 1..=K·C`.
pub fn assign_domain_class_labels(y: u32, d: usize, classes: usize, domains: usize) -> Result<u32, LatentError> {
    if y == 0 || y as usize > classes || d >= domains {
        return Err(LatentError::LabelOutOfRange { class: y, classes, domain: d, domains });
    }
    Ok((d * classes) as u32 + y)
}

/// Inverse of [`assign_domain_class_labels`]: `(d, y)`.
pub fn split_domain_class_label(s: u32, classes: usize) -> (usize, u32) {
    let zero = s as usize - 1;
    (zero / classes, (zero % classes) as u32 + 1)
}

/// Distance used for nearest-centroid assignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    Euclidean,
    /// Euclidean after scaling every embedding to unit length.
    #[default]
    NormalizedEuclidean,
}

impl Distance {
    /// Embeddings in the space where centroids live.
    pub fn prepare(&self, emb: &Array2<f64>) -> Array2<f64> {
        match self {
            Distance::Euclidean => emb.clone(),
            Distance::NormalizedEuclidean => {
                let mut out = emb.clone();
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let norm = row.dot(&row).sqrt();
                    if norm > 0.0 {
                        row /= norm;
                    }
                }
                out
            }
        }
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax-weighted centroids over the prepared embeddings.
///
/// `weights` is `[N, K]`. Fails if some domain receives (almost) no mass.
pub fn init_centroids_soft(emb: &Array2<f64>, weights: &Array2<f64>, distance: Distance) -> Result<Array2<f64>, LatentError> {
    if emb.nrows() != weights.nrows() {
        return Err(LatentError::Shape(format!("{} embeddings, {} weight rows", emb.nrows(), weights.nrows())));
    }
    let z = distance.prepare(emb);
    let totals = weights.sum_axis(Axis(0));
    if let Some((domain, &total)) = totals.iter().enumerate().find(|(_, &t)| t < 1e-12) {
        return Err(LatentError::DegenerateWeights { domain, total });
    }
    let mut centroids = weights.t().dot(&z);
    for (mut row, &t) in centroids.axis_iter_mut(Axis(0)).zip(totals.iter()) {
        row /= t;
    }
    Ok(centroids)
}

/// Index of the closest centroid per embedding; ties go to the lowest index.
pub fn assign_nearest(emb: &Array2<f64>, centroids: &Array2<f64>, distance: Distance) -> Vec<usize> {
    let z = distance.prepare(emb);
    nearest_prepared(&z, centroids)
}

fn nearest_prepared(z: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    z.axis_iter(Axis(0))
        .map(|row| {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in centroids.axis_iter(Axis(0)).enumerate() {
                let d = sq_dist(row, c);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// Replaces every centroid flagged in `empty` by the prepared embedding
/// farthest from its nearest current (non-empty or already re-seeded) centroid.
fn reseed(z: &Array2<f64>, centroids: &mut Array2<f64>, empty: &[bool]) {
    let mut live: Vec<usize> = (0..empty.len()).filter(|&k| !empty[k]).collect();
    for k in (0..empty.len()).filter(|&k| empty[k]) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, row) in z.axis_iter(Axis(0)).enumerate() {
            let nearest = live
                .iter()
                .map(|&j| sq_dist(row, centroids.row(j)))
                .fold(f64::INFINITY, f64::min);
            let nearest = if nearest.is_finite() { nearest } else { 0.0 };
            if nearest > best.0 {
                best = (nearest, i);
            }
        }
        centroids.row_mut(k).assign(&z.row(best.1));
        live.push(k);
    }
}

/// Soft initialization with empty-domain re-seeding instead of failure.
pub fn init_centroids_soft_or_reseed(emb: &Array2<f64>, weights: &Array2<f64>, distance: Distance) -> Array2<f64> {
    let z = distance.prepare(emb);
    let totals = weights.sum_axis(Axis(0));
    let mut centroids = weights.t().dot(&z);
    let mut empty = vec![false; totals.len()];
    for (k, (mut row, &t)) in centroids.axis_iter_mut(Axis(0)).zip(totals.iter()).enumerate() {
        if t < 1e-12 {
            empty[k] = true;
        } else {
            row /= t;
        }
    }
    if empty.iter().any(|&e| e) {
        reseed(&z, &mut centroids, &empty);
    }
    centroids
}

/// One hard refinement: indicator-weighted means of the current assignment,
/// then reassignment against those means. Empty domains are re-seeded.
pub fn update_centroids_hard(
    emb: &Array2<f64>,
    assignment: &[usize],
    domains: usize,
    distance: Distance,
) -> (Array2<f64>, Vec<usize>) {
    let z = distance.prepare(emb);
    let mut centroids = Array2::zeros((domains, z.ncols()));
    let mut counts = vec![0usize; domains];
    for (row, &k) in z.axis_iter(Axis(0)).zip(assignment) {
        centroids.row_mut(k).scaled_add(1.0, &row);
        counts[k] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        if n > 0 {
            centroids.row_mut(k).mapv_inplace(|v| v / n as f64);
        }
    }
    let empty: Vec<bool> = counts.iter().map(|&n| n == 0).collect();
    if empty.iter().any(|&e| e) {
        reseed(&z, &mut centroids, &empty);
    }
    let refined = nearest_prepared(&z, &centroids);
    (centroids, refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn domain_class_label_examples() {
        assert_eq!(assign_domain_class_labels(1, 0, 6, 3).unwrap(), 1);
        assert_eq!(assign_domain_class_labels(3, 1, 6, 3).unwrap(), 9);
        assert_eq!(assign_domain_class_labels(6, 2, 6, 3).unwrap(), 18);
        assert!(assign_domain_class_labels(0, 0, 6, 3).is_err());
        assert!(assign_domain_class_labels(7, 0, 6, 3).is_err());
        assert!(assign_domain_class_labels(1, 3, 6, 3).is_err());
    }

    #[test]
    fn single_domain_reduces_to_class_labels() {
        for y in 1..=5 {
            assert_eq!(assign_domain_class_labels(y, 0, 5, 1).unwrap(), y);
        }
    }

    #[test]
    fn one_hot_weights_pick_embeddings() {
        let emb = array![[1.0, 2.0], [3.0, -1.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let c = init_centroids_soft(&emb, &w, Distance::Euclidean).unwrap();
        assert_eq!(c, emb);
    }

    #[test]
    fn uniform_weights_give_global_mean() {
        let emb = array![[1.0, 2.0], [3.0, -1.0], [2.0, 2.0]];
        let w = Array2::from_elem((3, 2), 0.5);
        let c = init_centroids_soft(&emb, &w, Distance::Euclidean).unwrap();
        for row in c.axis_iter(Axis(0)) {
            assert!((row[0] - 2.0).abs() < 1e-12 && (row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_centroids_match_direct_weighted_means() {
        // 6 samples, 2 domains: μ_k = Σ δ_ik e_i / Σ δ_ik computed term by term
        let emb = array![[0.0, 1.0], [1.0, 1.0], [2.0, 0.5], [5.0, 5.0], [6.0, 4.0], [5.5, 6.0]];
        let w = array![[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.2, 0.8], [0.1, 0.9], [0.25, 0.75]];
        let c = init_centroids_soft(&emb, &w, Distance::Euclidean).unwrap();
        for k in 0..2 {
            let mut num = [0.0; 2];
            let mut den = 0.0;
            for i in 0..6 {
                den += w[[i, k]];
                num[0] += w[[i, k]] * emb[[i, 0]];
                num[1] += w[[i, k]] * emb[[i, 1]];
            }
            assert!((c[[k, 0]] - num[0] / den).abs() < 1e-6);
            assert!((c[[k, 1]] - num[1] / den).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_weights_reported_and_reseeded() {
        let emb = array![[0.0, 0.0], [4.0, 0.0], [1.0, 0.0]];
        let w = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert!(matches!(
            init_centroids_soft(&emb, &w, Distance::Euclidean),
            Err(LatentError::DegenerateWeights { domain: 1, .. })
        ));
        let c = init_centroids_soft_or_reseed(&emb, &w, Distance::Euclidean);
        // mean is (5/3, 0); farthest point from it is (4, 0)
        assert_eq!(c.row(1), array![4.0, 0.0]);
    }

    #[test]
    fn nearest_examples() {
        let c = array![[0.0, 0.0], [10.0, 10.0]];
        assert_eq!(assign_nearest(&array![[1.0, 1.0]], &c, Distance::Euclidean), vec![0]);
        assert_eq!(assign_nearest(&array![[5.0, 5.0]], &c, Distance::Euclidean), vec![0]);
        let c = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(assign_nearest(&array![[3.0, 3.0]], &c, Distance::NormalizedEuclidean), vec![0]);
        assert_eq!(assign_nearest(&array![[0.1, 9.0]], &c, Distance::NormalizedEuclidean), vec![1]);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = crate::rng::substream(21, "test");
        let emb = Array2::from_shape_fn((20, 4), |_| rng.random_range(-3.0..3.0));
        let c = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
        let got = assign_nearest(&emb, &c, Distance::Euclidean);
        for i in 0..20 {
            let d: Vec<f64> = (0..3)
                .map(|k| (0..4).map(|j| (emb[[i, j]] - c[[k, j]]).powi(2)).sum::<f64>().sqrt())
                .collect();
            let expected = (0..3).min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
            assert_eq!(got[i], expected);
        }
    }

    #[test]
    fn hard_update_fixed_point() {
        let emb = array![[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [5.0, 5.2]];
        let (_, d) = update_centroids_hard(&emb, &[0, 0, 1, 1], 2, Distance::Euclidean);
        assert_eq!(d, vec![0, 0, 1, 1]);
    }

    #[test]
    fn hard_update_recovers_separated_blobs() {
        let mut rng = crate::rng::substream(5, "blobs");
        let sigma = 0.5;
        let mut rows = Vec::new();
        let mut planted = Vec::new();
        for i in 0..40 {
            let blob = i % 2;
            let center = if blob == 0 { -2.5 } else { 2.5 }; // 10σ apart
            for _ in 0..3 {
                let n: f64 = StandardNormal.sample(&mut rng);
                rows.push(center + sigma * n);
            }
            planted.push(blob);
        }
        let emb = Array2::from_shape_vec((40, 3), rows).unwrap();
        // start from a poor assignment: first half vs second half
        let start: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let soft_c = array![[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]];
        let tilde = assign_nearest(&emb, &soft_c, Distance::Euclidean);
        let (_, d) = update_centroids_hard(&emb, &tilde, 2, Distance::Euclidean);
        assert_eq!(d, planted);
        let (_, d2) = update_centroids_hard(&emb, &start, 2, Distance::Euclidean);
        assert_eq!(d2.len(), 40);
    }

    #[test]
    fn identical_embeddings_collapse_and_reseed() {
        let emb = Array2::from_elem((5, 3), 1.0);
        let (c, d) = update_centroids_hard(&emb, &[0, 0, 0, 0, 0], 3, Distance::NormalizedEuclidean);
        assert!(d.iter().all(|&k| k == 0));
        assert!(c.iter().all(|v| v.is_finite()));
    }
}
