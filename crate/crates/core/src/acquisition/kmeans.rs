//! Weighted k-means (Lloyd iterations with k-means++ seeding) over
//! embedding rows. Shared by the clustering-based selectors.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub(crate) fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Draw an index with probability proportional to `weights`; falls back to
/// a uniform draw when the total mass vanishes.
pub(crate) fn weighted_draw(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return rng.random_range(0..weights.len());
    }
    let mut ticket = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        ticket -= w;
        if ticket < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

pub(crate) struct KMeansOutcome {
    pub centroids: Array2<f64>,
}

/// Weighted Lloyd iterations with weighted k-means++ seeding.
///
/// Empty clusters are reseeded to the point farthest from its assigned
/// centroid. Stops after `max_iter` rounds or when no centroid moves more
/// than a small fraction of the data scale.
pub(crate) fn weighted_kmeans(
    points: &ArrayView2<f64>,
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
) -> KMeansOutcome {
    let n = points.nrows();
    let d = points.ncols();
    debug_assert!(k >= 1 && k <= n && weights.len() == n);

    // k-means++ seeding with probability weight * D^2.
    let mut centroid_rows: Vec<usize> = Vec::with_capacity(k);
    centroid_rows.push(weighted_draw(weights, rng));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(centroid_rows[0])))
        .collect();
    while centroid_rows.len() < k {
        let probs: Vec<f64> = d2.iter().zip(weights).map(|(&d, &w)| d * w).collect();
        let next = weighted_draw(&probs, rng);
        centroid_rows.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(squared_distance(points.row(i), points.row(next)));
        }
    }
    let mut centroids = Array2::zeros((k, d));
    for (c, &row) in centroid_rows.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(row));
    }

    let scale = points
        .outer_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max)
        .max(1.0);
    let tol = 1e-6 * scale;

    let mut assignments = vec![0usize; n];
    for _ in 0..max_iter {
        // assignment step
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = squared_distance(points.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignments[i] = best;
        }
        // update step (weighted means)
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut mass = vec![0.0f64; k];
        for i in 0..n {
            let c = assignments[i];
            let w = weights[i].max(0.0);
            mass[c] += w;
            sums.row_mut(c).scaled_add(w, &points.row(i));
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if mass[c] > 0.0 {
                let new_c = &sums.row(c) / mass[c];
                shift = shift.max(squared_distance(centroids.row(c), new_c.view()).sqrt());
                centroids.row_mut(c).assign(&new_c);
            } else {
                // reseed an empty cluster to the point farthest from its
                // current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_distance(points.row(a), centroids.row(assignments[a]));
                        let db = squared_distance(points.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&points.row(far));
                shift = f64::INFINITY;
            }
        }
        if shift < tol {
            break;
        }
    }
    KMeansOutcome { centroids }
}

/// Nearest-centroid assignment for a finished clustering.
#[cfg(test)]
pub(crate) fn assign(points: &ArrayView2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    (0..points.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..centroids.nrows() {
                let d = squared_distance(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recovers_well_separated_clusters() {
        let pts = array![
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [10.0, 10.0],
            [10.1, 10.0],
            [10.0, 10.1],
        ];
        let weights = vec![1.0; 6];
        let mut rng = crate::rng::stream_rng(1, &[0]);
        let out = weighted_kmeans(&pts.view(), &weights, 2, &mut rng, 100);
        let assignments = assign(&pts.view(), &out.centroids);
        assert_eq!(assignments[0], assignments[1]);
        assert_eq!(assignments[0], assignments[2]);
        assert_eq!(assignments[3], assignments[4]);
        assert_ne!(assignments[0], assignments[3]);
    }

    #[test]
    fn heavy_weight_pulls_the_centroid() {
        let pts = array![[0.0], [1.0]];
        let weights = vec![3.0, 1.0];
        let mut rng = crate::rng::stream_rng(2, &[0]);
        let out = weighted_kmeans(&pts.view(), &weights, 1, &mut rng, 100);
        // weighted mean = (3*0 + 1*1)/4
        assert!((out.centroids[[0, 0]] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn weighted_draw_is_seed_deterministic() {
        let w = vec![0.2, 0.5, 0.3];
        let mut a = crate::rng::stream_rng(7, &[1]);
        let mut b = crate::rng::stream_rng(7, &[1]);
        for _ in 0..20 {
            assert_eq!(weighted_draw(&w, &mut a), weighted_draw(&w, &mut b));
        }
    }
}
