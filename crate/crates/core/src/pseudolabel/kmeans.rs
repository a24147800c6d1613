use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NcdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
fn nearest(point: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(j)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. A cluster that empties is
/// reseeded at the point farthest from its current centroid.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(NcdlError::Invalid(format!("k-means needs 1 <= k <= rows, got k={k} rows={n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(NcdlError::NonFinite("k-means input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];

    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        for (i, p) in points.rows().into_iter().enumerate() {
            counts[assignments[i]] += 1;
            sums.row_mut(assignments[i]).scaled_add(1.0, &p);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            } else {
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                centroids.row_mut(j).assign(&points.row(far));
                dists[far] = 0.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, p) in points.rows().into_iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        assignments[i] = j;
        inertia += d;
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
    })
}

/// One-hot labels from [`kmeans`].
pub fn kmeans_labels(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> Result<Array2<f64>> {
    let res = kmeans(points, k, max_iters, seed)?;
    let mut out = Array2::zeros((points.nrows(), k));
    for (i, &j) in res.assignments.iter().enumerate() {
        out[[i, j]] = 1.0;
    }
    Ok(out)
}
