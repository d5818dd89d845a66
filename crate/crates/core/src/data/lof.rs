//! Local Outlier Factor and the LOF-based source/target split.
//!
//! Brute-force neighbor search: exact, parallel over query points, and fast
//! enough for tabular data at this scale. Neighborhoods follow the textbook
//! definition: every point within the k-distance belongs to the
//! neighborhood, so ties can make it larger than `k`.

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::json;

use crate::data::{stratified_split_indices, Dataset, SplitManifest, SplitRole};
use crate::error::{Error, Result};

const LRD_FLOOR: f64 = 1e-12;

struct Neighborhood {
    k_distance: f64,
    // (neighbor index, true distance)
    members: Vec<(usize, f64)>,
}

/// Query-block width for the blocked distance computation.
const KNN_BLOCK: usize = 256;

/// Exact neighborhoods via blocked squared-distance GEMM:
/// `d2(a,b) = |a|^2 + |b|^2 - 2 a.b`, one matrix product per query block,
/// parallel over blocks.
fn neighborhoods(x: &Array2<f64>, k: usize) -> Vec<Neighborhood> {
    let n = x.nrows();
    let sq_norms: Vec<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let xt = x.t();

    let block_starts: Vec<usize> = (0..n).step_by(KNN_BLOCK).collect();
    block_starts
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + KNN_BLOCK).min(n);
            let gram = x.slice(ndarray::s![start..end, ..]).dot(&xt);
            let mut out = Vec::with_capacity(end - start);
            let mut dist = vec![0.0f64; n];
            for i in start..end {
                let row = gram.row(i - start);
                for j in 0..n {
                    // cancellation can leave tiny negatives; clamp
                    dist[j] = (sq_norms[i] + sq_norms[j] - 2.0 * row[j]).max(0.0);
                }
                dist[i] = f64::INFINITY;
                let mut scratch: Vec<f64> = dist.iter().copied().filter(|d| d.is_finite()).collect();
                let (_, kth, _) =
                    scratch.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
                let kdist_sq = *kth;
                let mut members: Vec<(usize, f64)> = dist
                    .iter()
                    .enumerate()
                    .filter(|(j, d)| *j != i && **d <= kdist_sq)
                    .map(|(j, d)| (j, d.sqrt()))
                    .collect();
                members.sort_unstable_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                out.push(Neighborhood {
                    k_distance: kdist_sq.sqrt(),
                    members,
                });
            }
            out
        })
        .collect()
}

/// Local Outlier Factor scores (Breunig et al. construction): k-distances,
/// reachability distances, local reachability density, and the final score
/// as the mean neighbor-to-own density ratio. Scores near 1 mean inlier.
pub fn lof_scores(x: &Array2<f64>, k: usize) -> Result<Vec<f64>> {
    let n = x.nrows();
    if k < 1 {
        return Err(Error::Config("LOF requires k >= 1".into()));
    }
    if n <= k {
        return Err(Error::Config(format!(
            "LOF requires more points ({n}) than neighbors (k={k})"
        )));
    }
    let hoods = neighborhoods(x, k);

    let lrd: Vec<f64> = hoods
        .par_iter()
        .map(|h| {
            let reach_sum: f64 = h
                .members
                .iter()
                .map(|&(q, d)| d.max(hoods[q].k_distance))
                .sum();
            h.members.len() as f64 / reach_sum.max(LRD_FLOOR)
        })
        .collect();

    Ok(hoods
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let ratio_sum: f64 = h.members.iter().map(|&(q, _)| lrd[q]).sum();
            ratio_sum / (h.members.len() as f64 * lrd[i].max(LRD_FLOOR))
        })
        .collect())
}

/// Number of points flagged as outliers for a contamination fraction.
pub fn outlier_count(n: usize, contamination: f64) -> usize {
    ((contamination * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1))
}

/// Carve a distribution-shifted test split out of a single labeled table:
/// the top `contamination` fraction by LOF score becomes the target test
/// set, and the remainder is split (stratified, seeded) into source
/// train/val.
pub fn lof_shift_split(
    dataset: &Dataset,
    contamination: f64,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, SplitManifest)> {
    let scores = lof_scores(&dataset.x, k)?;
    lof_shift_split_with_scores(dataset, &scores, contamination, k, val_fraction, seed)
}

/// [`lof_shift_split`] with precomputed LOF scores, so multi-seed
/// experiments run the neighbor search once. `k` is recorded in the
/// manifest for reproducibility and must match how `scores` were computed.
pub fn lof_shift_split_with_scores(
    dataset: &Dataset,
    scores: &[f64],
    contamination: f64,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, SplitManifest)> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(Error::Config(format!(
            "contamination must be in (0,1), got {contamination}"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let n = dataset.len();
    if scores.len() != n {
        return Err(Error::Shape(format!(
            "{} LOF scores for {n} rows",
            scores.len()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n_out = outlier_count(n, contamination);
    let mut test_indices: Vec<usize> = order[..n_out].to_vec();
    let mut rest_indices: Vec<usize> = order[n_out..].to_vec();
    test_indices.sort_unstable();
    rest_indices.sort_unstable();
    if rest_indices.is_empty() {
        return Err(Error::Config("no points left after outlier removal".into()));
    }

    let rest_y: Vec<usize> = rest_indices.iter().map(|&i| dataset.y[i]).collect();
    let (train_pos, val_pos) =
        stratified_split_indices(&rest_y, dataset.n_classes, 1.0 - val_fraction, seed)?;
    let train_indices: Vec<usize> = train_pos.iter().map(|&p| rest_indices[p]).collect();
    let val_indices: Vec<usize> = val_pos.iter().map(|&p| rest_indices[p]).collect();

    let train = dataset.subset(&train_indices, SplitRole::SourceTrain)?;
    let val = dataset.subset(&val_indices, SplitRole::SourceVal)?;
    let test = dataset.subset(&test_indices, SplitRole::TargetTest)?;
    let manifest = SplitManifest {
        seed,
        parameters: json!({
            "kind": "lof_shift",
            "contamination": contamination,
            "lof_k": k,
            "val_fraction": val_fraction,
        }),
        train_indices,
        val_indices,
        test_indices,
    };
    Ok((train, val, test, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Straight-from-the-definition LOF, O(n^2 log n), for tiny inputs.
    fn lof_direct(points: &[Vec<f64>], k: usize) -> Vec<f64> {
        let n = points.len();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut kdist = vec![0.0; n];
        let mut hood: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let mut ds: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist(&points[i], &points[j]), j))
                .collect();
            ds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            kdist[i] = ds[k - 1].0;
            hood[i] = ds.iter().filter(|(d, _)| *d <= kdist[i]).map(|&(_, j)| j).collect();
        }
        let lrd: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = hood[i]
                    .iter()
                    .map(|&q| dist(&points[i], &points[q]).max(kdist[q]))
                    .sum();
                hood[i].len() as f64 / s.max(1e-12)
            })
            .collect();
        (0..n)
            .map(|i| {
                hood[i].iter().map(|&q| lrd[q]).sum::<f64>()
                    / (hood[i].len() as f64 * lrd[i].max(1e-12))
            })
            .collect()
    }

    fn to_array(points: &[Vec<f64>]) -> Array2<f64> {
        let d = points[0].len();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Array2::from_shape_vec((points.len(), d), flat).unwrap()
    }

    #[test]
    fn uniform_grid_interior_is_inlier() {
        // 7-point 1-D grid, k=2, direct formula: the deep-interior point
        // scores exactly 1; depth-1 points feel the boundary through their
        // neighbors' densities and score 5/6.
        let points: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let scores = lof_scores(&to_array(&points), 2).unwrap();
        assert!(
            scores[3] > 0.9 && scores[3] < 1.1,
            "interior point scored {}",
            scores[3]
        );
        for i in [2, 4] {
            assert!((scores[i] - 5.0 / 6.0).abs() < 1e-12, "point {i}: {}", scores[i]);
        }
        let direct = lof_direct(&points, 2);
        for (a, b) in scores.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn far_outlier_scores_high() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![0.1, 0.1],
            vec![0.05, 0.05],
            vec![5.0, 5.0],
        ];
        let scores = lof_scores(&to_array(&points), 2).unwrap();
        assert!(scores[5] > 1.5, "outlier scored {}", scores[5]);
        for s in &scores[..5] {
            assert!(*s < scores[5]);
        }
    }

    #[test]
    fn too_few_points_errors() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(lof_scores(&to_array(&points), 2).is_err());
        assert!(lof_scores(&to_array(&points), 0).is_err());
    }

    #[test]
    fn matches_direct_formula_on_small_random_sets() {
        let mut rng = crate::rng::stream_rng(11, &[1]);
        for trial in 0..200 {
            let n = rng.random_range(4..=8);
            let d = rng.random_range(1..=3);
            let k = rng.random_range(1..n.min(4));
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let fast = lof_scores(&to_array(&points), k).unwrap();
            let slow = lof_direct(&points, k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn duplicate_points_stay_finite() {
        let points = vec![vec![1.0], vec![1.0], vec![1.0], vec![4.0]];
        let scores = lof_scores(&to_array(&points), 2).unwrap();
        for s in &scores {
            assert!(s.is_finite());
        }
    }

    #[test]
    fn outlier_count_matches_protocol_sizes() {
        assert_eq!(outlier_count(61_878, 0.2), 12_376);
        assert_eq!(outlier_count(10, 0.5), 5);
        assert_eq!(outlier_count(10, 0.01), 1);
    }

    #[test]
    fn shift_split_partitions_and_flags_the_planted_outliers() {
        // 20 tight points + 5 far ones in different directions (so the far
        // points are not neighbors of each other); contamination 0.2 of 25
        // = 5.
        let mut points: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i % 5) as f64 * 0.01, (i / 5) as f64 * 0.01])
            .collect();
        points.push(vec![100.0, 0.0]);
        points.push(vec![-100.0, 0.0]);
        points.push(vec![0.0, 100.0]);
        points.push(vec![0.0, -100.0]);
        points.push(vec![80.0, 80.0]);
        let y: Vec<usize> = (0..25).map(|i| i % 2).collect();
        let ds = Dataset::new(to_array(&points), y, 2, SplitRole::Unsplit).unwrap();
        let (train, val, test, manifest) = lof_shift_split(&ds, 0.2, 2, 0.25, 7).unwrap();
        assert_eq!(test.len(), 5);
        assert_eq!(train.len() + val.len(), 20);
        assert_eq!(manifest.test_indices, vec![20, 21, 22, 23, 24]);
        // partition: no index reused
        let mut all: Vec<usize> = manifest
            .train_indices
            .iter()
            .chain(&manifest.val_indices)
            .chain(&manifest.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }
}
