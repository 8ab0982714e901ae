//! Evaluation metrics: accuracy, macro-F1, confusion matrices, the
//! Davies-Bouldin and Calinski-Harabasz cluster indices, and the pooled
//! spread of predicted distributions.

use serde::{Deserialize, Serialize};

use crate::error::{FelError, Result};
use crate::tensor::Tensor;

fn check_pair(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
    if preds.is_empty() || labels.is_empty() {
        return Err(FelError::Contract("metrics need at least one sample".into()));
    }
    if preds.len() != labels.len() {
        return Err(FelError::Shape(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&v| v >= n_classes) {
        return Err(FelError::Contract(format!(
            "class index {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || labels.is_empty() {
        return Err(FelError::Contract("accuracy needs at least one sample".into()));
    }
    if preds.len() != labels.len() {
        return Err(FelError::Shape(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over all `n_classes` classes. A class
/// with no true samples and no predictions contributes 0, a deliberately
/// pessimistic convention that keeps the average deterministic.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_pair(preds, labels, n_classes)?;
    if n_classes == 0 {
        return Err(FelError::Contract("macro F1 needs at least one class".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(total / n_classes as f64)
}

/// Raw confusion counts: entry `(i, j)` counts true-`i` samples
/// predicted `j`.
pub fn confusion_counts(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check_pair(preds, labels, n_classes)?;
    let mut counts = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        counts[l][p] += 1;
    }
    Ok(counts)
}

/// Row-normalized confusion matrix `[n_classes, n_classes]`: entry
/// `(i, j)` is the fraction of true-`i` samples predicted `j`. Rows with
/// no support stay all-zero.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let counts = confusion_counts(preds, labels, n_classes)?;
    let mut data = Vec::with_capacity(n_classes * n_classes);
    for row in &counts {
        let support: usize = row.iter().sum();
        for &v in row {
            data.push(if support == 0 { 0.0 } else { v as f64 / support as f64 });
        }
    }
    Tensor::new(vec![n_classes, n_classes], data)
}

struct Clusters {
    centroids: Vec<Vec<f64>>,
    sizes: Vec<usize>,
    /// Point indices per cluster, in label order of first appearance of
    /// each distinct label value 0..max.
    members: Vec<Vec<usize>>,
}

fn cluster_stats(embeddings: &Tensor, labels: &[usize]) -> Result<Clusters> {
    let (n, d) = embeddings.dims2();
    if labels.len() != n {
        return Err(FelError::Shape(format!(
            "embedding/label count mismatch: {n} vs {}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(FelError::Contract("cluster metrics need at least one point".into()));
    }
    let n_clusters = labels.iter().max().unwrap() + 1;
    let mut members = vec![Vec::new(); n_clusters];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    if members.iter().any(|m| m.is_empty()) {
        return Err(FelError::Contract(
            "cluster metrics need every class label in 0..max to appear".into(),
        ));
    }
    let mut centroids = Vec::with_capacity(n_clusters);
    let mut sizes = Vec::with_capacity(n_clusters);
    for m in &members {
        let mut c = vec![0.0; d];
        for &i in m {
            for (acc, v) in c.iter_mut().zip(embeddings.row(i)) {
                *acc += v;
            }
        }
        for v in &mut c {
            *v /= m.len() as f64;
        }
        centroids.push(c);
        sizes.push(m.len());
    }
    Ok(Clusters { centroids, sizes, members })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index: mean over clusters of the worst pairwise
/// `(sigma_i + sigma_j) / d(c_i, c_j)`, where `sigma` is the mean member
/// distance to the cluster centroid. Lower is better. Coincident
/// centroids make the ratio undefined and are reported as an error
/// rather than a silent infinity.
pub fn davies_bouldin(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let clusters = cluster_stats(embeddings, labels)?;
    let k = clusters.centroids.len();
    if k < 2 {
        return Err(FelError::Contract(format!(
            "davies-bouldin needs at least two clusters, got {k}"
        )));
    }
    let sigmas: Vec<f64> = clusters
        .members
        .iter()
        .zip(&clusters.centroids)
        .map(|(m, c)| {
            m.iter().map(|&i| euclidean(embeddings.row(i), c)).sum::<f64>() / m.len() as f64
        })
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let dist = euclidean(&clusters.centroids[i], &clusters.centroids[j]);
            if dist == 0.0 {
                return Err(FelError::Numeric(format!(
                    "clusters {i} and {j} have coincident centroids; \
                     davies-bouldin is undefined"
                )));
            }
            worst = worst.max((sigmas[i] + sigmas[j]) / dist);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Calinski-Harabasz index in trace form:
/// `(B / (k - 1)) / (W / (n - k))` with `B` the size-weighted squared
/// centroid scatter and `W` the within-cluster squared scatter. Higher
/// is better. Zero within-cluster dispersion yields `+inf` as an explicit
/// sentinel rather than an error, since it signals perfect clustering.
pub fn calinski_harabasz(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let clusters = cluster_stats(embeddings, labels)?;
    let (n, d) = embeddings.dims2();
    let k = clusters.centroids.len();
    if k < 2 {
        return Err(FelError::Contract(format!(
            "calinski-harabasz needs at least two clusters, got {k}"
        )));
    }
    if n <= k {
        return Err(FelError::Contract(format!(
            "calinski-harabasz needs more points than clusters, got {n} points and {k} clusters"
        )));
    }
    let mut overall = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in overall.iter_mut().zip(embeddings.row(i)) {
            *acc += v;
        }
    }
    for v in &mut overall {
        *v /= n as f64;
    }
    let mut between = 0.0;
    for (c, &size) in clusters.centroids.iter().zip(&clusters.sizes) {
        let dist = euclidean(c, &overall);
        between += size as f64 * dist * dist;
    }
    let mut within = 0.0;
    for (m, c) in clusters.members.iter().zip(&clusters.centroids) {
        for &i in m {
            let dist = euclidean(embeddings.row(i), c);
            within += dist * dist;
        }
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k as f64 - 1.0)) / (within / (n as f64 - k as f64)))
}

/// Population standard deviation of all entries of a `[B, N]` batch of
/// distributions, pooled over the whole batch.
fn pooled_std(batch: &Tensor) -> f64 {
    let data = batch.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Pooled entry spread of the primary and corrected prediction batches.
/// A corrected batch closer to uniform has strictly smaller spread.
pub fn distribution_spread(primary: &Tensor, corrected: &Tensor) -> Result<(f64, f64)> {
    if primary.shape() != corrected.shape() {
        return Err(FelError::Shape(format!(
            "primary/corrected shape mismatch: {:?} vs {:?}",
            primary.shape(),
            corrected.shape()
        )));
    }
    if primary.data().is_empty() {
        return Err(FelError::Contract("distribution spread needs at least one sample".into()));
    }
    Ok((pooled_std(primary), pooled_std(corrected)))
}

/// Full evaluation summary. `db_score`/`ch_score` are `None` when the
/// index is undefined or infinite for this embedding set (JSON `null`),
/// with the reason recorded in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Row-normalized, `n_classes` rows of `n_classes` entries.
    pub confusion: Vec<Vec<f64>>,
    pub db_score: Option<f64>,
    pub ch_score: Option<f64>,
    pub primary_std: f64,
    pub corrected_std: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    /// Confusion matrix as CSV: one row per true class, plain numbers.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn accuracy_contract() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0, 0], &[1, 2, 3, 4]).unwrap(), 0.5);
        // Hand-counted three-class case: matches at positions 0, 3, 4.
        let preds = [0, 1, 2, 2, 1, 0];
        let labels = [0, 2, 1, 2, 1, 1];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 3.0 / 6.0);
        assert!(matches!(accuracy(&[], &[]), Err(FelError::Contract(_))));
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(FelError::Shape(_))));
    }

    #[test]
    fn macro_f1_contract() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // Per class TP=1 FP=1 FN=1 -> F1 = 0.5 each.
        let f1 = macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((f1 - 0.5).abs() < 1e-15);
        // A class absent from preds and labels contributes zero.
        let f1 = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(macro_f1(&[], &[], 3), Err(FelError::Contract(_))));
        assert!(matches!(macro_f1(&[3], &[0], 3), Err(FelError::Contract(_))));
    }

    #[test]
    fn confusion_matrix_contract() {
        let id = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(id.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

        let all_zero = confusion_matrix(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        for r in 0..3 {
            assert_eq!(all_zero.row(r), &[1.0, 0.0, 0.0]);
        }

        // Hand 5-sample case over 3 classes:
        // true 0 -> preds 0, 1; true 1 -> preds 1; true 2 -> preds 2, 0.
        let preds = [0, 1, 1, 2, 0];
        let labels = [0, 0, 1, 2, 2];
        let m = confusion_matrix(&preds, &labels, 3).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(m.row(2), &[0.5, 0.0, 0.5]);

        // A class with no true samples stays an all-zero row.
        let m = confusion_matrix(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(m.row(1), &[0.0, 0.0]);

        // Rows with support sum to 1.
        for r in 0..3 {
            let m = confusion_matrix(&preds, &labels, 3).unwrap();
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_equals_confusion_trace_over_n() {
        let mut rng = substream(77, "metrics-trace");
        let n = 200;
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let counts = confusion_counts(&preds, &labels, 5).unwrap();
        let trace: usize = (0..5).map(|i| counts[i][i]).sum();
        let acc = accuracy(&preds, &labels).unwrap();
        assert!((acc - trace as f64 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let preds = [0, 1, 2, 1, 0, 2, 2];
        let labels = [0, 2, 2, 1, 1, 2, 0];
        let perm = [3, 6, 0, 5, 2, 4, 1];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(accuracy(&preds, &labels).unwrap(), accuracy(&p2, &l2).unwrap());
        assert_eq!(
            macro_f1(&preds, &labels, 3).unwrap(),
            macro_f1(&p2, &l2, 3).unwrap()
        );
        assert_eq!(
            confusion_matrix(&preds, &labels, 3).unwrap(),
            confusion_matrix(&p2, &l2, 3).unwrap()
        );
    }

    fn points(rows: &[[f64; 2]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), 2], data).unwrap()
    }

    #[test]
    fn davies_bouldin_hand_cases() {
        // Two singleton clusters: zero dispersion, so DB = 0.
        let e = points(&[[0.0, 0.0], [3.0, 0.0]]);
        assert_eq!(davies_bouldin(&e, &[0, 1]).unwrap(), 0.0);

        // Two clusters of two points: sigma = 1 each, centroid distance 4.
        let e = points(&[[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [2.0, 4.0]]);
        let db = davies_bouldin(&e, &[0, 0, 1, 1]).unwrap();
        assert!((db - 0.5).abs() < 1e-12, "db = {db}");

        // Shrinking intra-cluster spread with fixed centroids lowers DB.
        let tighter = points(&[[0.5, 0.0], [1.5, 0.0], [0.5, 4.0], [1.5, 4.0]]);
        let db2 = davies_bouldin(&tighter, &[0, 0, 1, 1]).unwrap();
        assert!(db2 < db);

        // Coincident centroids are an explicit error.
        let e = points(&[[0.0, 0.0], [2.0, 0.0], [1.0, -1.0], [1.0, 1.0]]);
        assert!(matches!(
            davies_bouldin(&e, &[0, 0, 1, 1]),
            Err(FelError::Numeric(_))
        ));

        // Fewer than two clusters is a contract violation.
        let e = points(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(davies_bouldin(&e, &[0, 0]), Err(FelError::Contract(_))));
        assert!(matches!(
            davies_bouldin(&e, &[0, 2]),
            Err(FelError::Contract(_))
        ));
    }

    #[test]
    fn calinski_harabasz_hand_cases() {
        // Two tight pairs: B = 100, W = 4, k = 2, n = 4 -> CH = 50.
        let e = points(&[[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]]);
        let labels = [0, 0, 1, 1];
        let ch = calinski_harabasz(&e, &labels).unwrap();
        assert!((ch - 50.0).abs() < 1e-12, "ch = {ch}");

        // Scaling all embeddings leaves CH unchanged.
        let scaled = Tensor::new(
            vec![4, 2],
            e.data().iter().map(|v| v * 3.7).collect(),
        )
        .unwrap();
        let ch_scaled = calinski_harabasz(&scaled, &labels).unwrap();
        assert!((ch - ch_scaled).abs() < 1e-9 * ch.max(1.0));

        // Wider centroid separation with fixed within-scatter raises CH.
        let farther = points(&[[0.0, 0.0], [0.0, 2.0], [20.0, 0.0], [20.0, 2.0]]);
        assert!(calinski_harabasz(&farther, &labels).unwrap() > ch);

        // Zero within-dispersion: +inf sentinel, not an error.
        let e = points(&[[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]]);
        assert_eq!(calinski_harabasz(&e, &labels).unwrap(), f64::INFINITY);

        // Contract errors: one cluster; not more points than clusters.
        let e = points(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(calinski_harabasz(&e, &[0, 0]), Err(FelError::Contract(_))));
        assert!(matches!(calinski_harabasz(&e, &[0, 1]), Err(FelError::Contract(_))));
    }

    /// Textbook reimplementations used as an independent oracle.
    mod brute {
        pub fn db(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
            let centroid = |c: usize| -> Vec<f64> {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                let d = members[0].len();
                (0..d)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect()
            };
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            let sigma = |c: usize| -> f64 {
                let cen = centroid(c);
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                members.iter().map(|p| dist(p, &cen)).sum::<f64>() / members.len() as f64
            };
            let mut total = 0.0;
            for i in 0..k {
                let mut worst = f64::MIN;
                for j in 0..k {
                    if i != j {
                        let r = (sigma(i) + sigma(j)) / dist(&centroid(i), &centroid(j));
                        worst = worst.max(r);
                    }
                }
                total += worst;
            }
            total / k as f64
        }

        pub fn ch(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
            let n = points.len();
            let d = points[0].len();
            let mean = |ps: &[&Vec<f64>]| -> Vec<f64> {
                (0..d)
                    .map(|j| ps.iter().map(|p| p[j]).sum::<f64>() / ps.len() as f64)
                    .collect()
            };
            let all: Vec<&Vec<f64>> = points.iter().collect();
            let grand = mean(&all);
            let mut b = 0.0;
            let mut w = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                let cen = mean(&members);
                b += members.len() as f64
                    * cen.iter().zip(&grand).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                for p in &members {
                    w += p.iter().zip(&cen).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                }
            }
            (b / (k as f64 - 1.0)) / (w / (n as f64 - k as f64))
        }
    }

    #[test]
    fn cluster_indices_match_brute_force_on_random_instances() {
        for trial in 0..50u64 {
            let mut rng = substream(trial, "cluster-oracle");
            let k = rng.random_range(2..5usize);
            let d = rng.random_range(1..4usize);
            let n = rng.random_range(k + 1..k + 12);
            let mut labels: Vec<usize> = (0..k).collect();
            for _ in k..n {
                labels.push(rng.random_range(0..k));
            }
            let mut pts = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                let p: Vec<f64> = (0..d)
                    .map(|j| 5.0 * l as f64 + rng.random::<f64>() + 0.01 * (i + j) as f64)
                    .collect();
                pts.push(p);
            }
            let flat: Vec<f64> = pts.iter().flatten().copied().collect();
            let e = Tensor::new(vec![n, d], flat).unwrap();

            let db = davies_bouldin(&e, &labels).unwrap();
            let db_ref = brute::db(&pts, &labels, k);
            assert!((db - db_ref).abs() <= 1e-9, "trial {trial}: {db} vs {db_ref}");

            let ch = calinski_harabasz(&e, &labels).unwrap();
            let ch_ref = brute::ch(&pts, &labels, k);
            assert!(
                (ch - ch_ref).abs() <= 1e-9 * ch_ref.max(1.0),
                "trial {trial}: {ch} vs {ch_ref}"
            );
        }
    }

    #[test]
    fn distribution_spread_contract() {
        // Uniform batch: zero spread.
        let uniform = Tensor::new(vec![4, 8], vec![0.125; 32]).unwrap();
        let (p, c) = distribution_spread(&uniform, &uniform).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(c, 0.0);

        // Batch of one-hots over 8 classes: direct pooled-std oracle.
        let mut data = vec![0.0; 32];
        for i in 0..4 {
            data[i * 8 + i] = 1.0;
        }
        let onehots = Tensor::new(vec![4, 8], data.clone()).unwrap();
        let mean = 4.0 / 32.0;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        let expect = var.sqrt();
        let (p, _) = distribution_spread(&onehots, &uniform).unwrap();
        assert!((p - expect).abs() < 1e-15);

        // Mixing halfway to uniform strictly contracts the spread.
        let mixed = Tensor::new(
            vec![4, 8],
            data.iter().map(|v| 0.5 * v + 0.5 * 0.125).collect(),
        )
        .unwrap();
        let (p, c) = distribution_spread(&onehots, &mixed).unwrap();
        assert!(c < p);
        assert!((c - 0.5 * p).abs() < 1e-15);

        let bad = Tensor::new(vec![2, 8], vec![0.125; 16]).unwrap();
        assert!(matches!(
            distribution_spread(&onehots, &bad),
            Err(FelError::Shape(_))
        ));
    }

    #[test]
    fn eval_report_serializes_with_fixed_keys() {
        let report = EvalReport {
            accuracy: 0.875,
            macro_f1: 0.8,
            confusion: vec![vec![1.0, 0.0], vec![0.25, 0.75]],
            db_score: Some(0.4),
            ch_score: None,
            primary_std: 0.33,
            corrected_std: 0.28,
            notes: vec!["calinski-harabasz infinite: zero within-cluster dispersion".into()],
        };
        let json = serde_json::to_string(&report).unwrap();
        for key in [
            "\"accuracy\"",
            "\"macro_f1\"",
            "\"confusion\"",
            "\"db_score\"",
            "\"ch_score\"",
            "\"primary_std\"",
            "\"corrected_std\"",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        assert!(json.contains("\"ch_score\":null"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let csv = report.confusion_csv();
        assert_eq!(csv, "1,0\n0.25,0.75\n");
    }
}
