//! Lloyd's k-means with k-means++ seeding. Deterministic given (data order,
//! seed); ties break to the lowest centroid index; dead centroids are
//! reseeded to the point farthest from its assigned centroid.

use crate::mat::{dist2, Mat};
use crate::Scalar;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {needed} distinct points, found {found}")]
    NotEnoughDistinctPoints { needed: usize, found: usize },
    #[error("dimension mismatch: data has {data}, codebook has {codebook}")]
    DimMismatch { data: usize, codebook: usize },
    #[error("k must be positive")]
    ZeroK,
}

#[derive(Clone, Debug)]
pub struct KmeansCodebook<T> {
    /// K x D centroid matrix.
    pub centroids: Mat<T>,
    /// Points assigned to each centroid at the final iteration.
    pub counts: Vec<u64>,
}

impl<T: Scalar> KmeansCodebook<T> {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    /// Inertia recorded after each assignment step.
    pub inertia_per_iter: Vec<f64>,
    pub iterations: usize,
    pub reseeded_centroids: usize,
}

/// Nearest centroid index and squared distance; ties go to the lowest index.
pub fn nearest<T: Scalar>(centroids: &Mat<T>, x: &[T]) -> (usize, T) {
    let mut best = 0usize;
    let mut best_d = dist2(centroids.row(0), x);
    for k in 1..centroids.rows() {
        let d = dist2(centroids.row(k), x);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn count_distinct<T: Scalar>(data: &Mat<T>) -> usize {
    let mut idx: Vec<usize> = (0..data.rows()).collect();
    idx.sort_by(|&a, &b| {
        data.row(a)
            .iter()
            .zip(data.row(b))
            .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut distinct = if data.rows() > 0 { 1 } else { 0 };
    for w in idx.windows(2) {
        if data.row(w[0]) != data.row(w[1]) {
            distinct += 1;
        }
    }
    distinct
}

fn kmeanspp_init<T: Scalar>(data: &Mat<T>, k: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    let n = data.rows();
    let mut centroids = Mat::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    centroids.set_row(0, data.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist2(data.row(i), centroids.row(0)).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // all mass at existing centroids; fall back to uniform
            rng.random_range(0..n)
        } else {
            let threshold: f64 = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc >= threshold {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.set_row(c, data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = dist2(data.row(i), centroids.row(c)).as_f64();
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Runs k-means++ seeding then Lloyd iterations until `max_iters` or the
/// relative inertia change drops below 1e-6.
pub fn kmeans_fit<T: Scalar>(
    data: &Mat<T>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(KmeansCodebook<T>, FitReport), ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let n = data.rows();
    let distinct = count_distinct(data);
    if distinct < k {
        return Err(ClusterError::NotEnoughDistinctPoints {
            needed: k,
            found: distinct,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(data, k, &mut rng);
    let mut report = FitReport::default();
    let mut assign = vec![0usize; n];
    let mut counts = vec![0u64; k];

    for iter in 0..max_iters.max(1) {
        // assignment (data-parallel; per-point results independent)
        let pairs: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (a, d) = nearest(&centroids, data.row(i));
                (a, d.as_f64())
            })
            .collect();
        let mut inertia = 0.0f64;
        for (i, (a, d)) in pairs.into_iter().enumerate() {
            assign[i] = a;
            inertia += d;
        }
        report.inertia_per_iter.push(inertia);
        report.iterations = iter + 1;

        // update
        let mut sums = Mat::<T>::zeros(k, data.cols());
        counts.fill(0);
        for i in 0..n {
            sums.add_to_row(assign[i], data.row(i));
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::from_f64(1.0 / counts[c] as f64);
                let row = sums.row_mut(c);
                for v in row.iter_mut() {
                    *v *= inv;
                }
                centroids.set_row(c, sums.row(c));
            }
        }
        // reseed dead centroids to the farthest point from its centroid
        let dead: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !dead.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let da = dist2(data.row(a), centroids.row(assign[a])).as_f64();
                let db = dist2(data.row(b), centroids.row(assign[b])).as_f64();
                db.partial_cmp(&da).unwrap_or(std::cmp::Ordering::Equal)
            });
            for (slot, &c) in dead.iter().enumerate() {
                centroids.set_row(c, data.row(order[slot % n]));
                report.reseeded_centroids += 1;
            }
        }

        // convergence check on the recorded inertia
        let m = report.inertia_per_iter.len();
        if m >= 2 && dead.is_empty() {
            let prev = report.inertia_per_iter[m - 2];
            let cur = report.inertia_per_iter[m - 1];
            if prev <= 0.0 || (prev - cur).abs() / prev.max(1e-300) < 1e-6 {
                break;
            }
        }
    }

    // final assignment so counts reflect the returned centroids
    let pairs: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| nearest(&centroids, data.row(i)).0)
        .collect();
    counts.fill(0);
    for a in pairs {
        counts[a] += 1;
    }

    Ok((
        KmeansCodebook {
            centroids,
            counts,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_data() -> Mat<f64> {
        // three well-separated blobs of 30 points each in 4-D
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let centers = [[0.0; 4], [10.0, 0.0, 0.0, 0.0], [0.0, 10.0, 0.0, 0.0]];
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..30 {
                rows.push((0..4).map(|d| c[d] + rng.random_range(-0.5..0.5)).collect::<Vec<f64>>());
            }
        }
        Mat::from_rows(&rows)
    }

    #[test]
    fn k1_is_the_mean() {
        let data = blob_data();
        let (cb, _) = kmeans_fit(&data, 1, 0, 50).unwrap();
        for d in 0..4 {
            let mean: f64 = (0..data.rows()).map(|i| data.get(i, d)).sum::<f64>() / data.rows() as f64;
            assert!((cb.centroids.get(0, d) - mean).abs() < 1e-9);
        }
        assert_eq!(cb.counts[0], 90);
    }

    #[test]
    fn k_equals_distinct_points_gives_zero_inertia() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let data = Mat::from_rows(&rows);
        let (_, report) = kmeans_fit(&data, 8, 3, 50).unwrap();
        assert!(report.inertia_per_iter.last().unwrap() < &1e-18);
    }

    #[test]
    fn inertia_is_monotone_non_increasing() {
        let data = blob_data();
        let (_, report) = kmeans_fit(&data, 5, 17, 60).unwrap();
        for w in report.inertia_per_iter.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "inertia increased: {w:?}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = blob_data();
        let (a, _) = kmeans_fit(&data, 4, 5, 40).unwrap();
        let (b, _) = kmeans_fit(&data, 4, 5, 40).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn too_few_distinct_points_is_an_error() {
        let rows = vec![vec![1.0, 2.0]; 10];
        let data = Mat::from_rows(&rows);
        match kmeans_fit(&data, 2, 0, 10) {
            Err(ClusterError::NotEnoughDistinctPoints { needed: 2, found: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_centroid_has_support() {
        let data = blob_data();
        let (cb, _) = kmeans_fit(&data, 6, 2, 60).unwrap();
        assert!(cb.counts.iter().all(|&c| c >= 1), "counts {:?}", cb.counts);
    }
}
