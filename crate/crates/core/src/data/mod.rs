//! Dataset representation, ingestion, normalization and split construction.
//!
//! Feature matrices are dense `f64` arrays (`n x d`), labels are dense class
//! indices in `0..K`. Splits carry a role tag so the training code can keep
//! source/target bookkeeping straight.

mod csv_io;
mod lof;
mod synth;

pub use csv_io::{load_csv_dataset, CsvSchema, LabelMap};
pub use lof::{lof_scores, lof_shift_split, lof_shift_split_with_scores, outlier_count};
pub use synth::{synth_gaussian_shift, SynthShiftSpec};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Which split a dataset plays in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    SourceTrain,
    SourceVal,
    TargetTest,
    Unsplit,
}

/// A labeled tabular dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub role: SplitRole,
}

impl Dataset {
    /// Build a dataset, validating label range and feature finiteness.
    pub fn new(x: Array2<f64>, y: Vec<usize>, n_classes: usize, role: SplitRole) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Ingest("dataset has no rows".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "feature rows ({}) != label count ({})",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(row) = x.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Ingest(format!("non-finite feature value at row {row}")));
        }
        if let Some((row, &label)) = y.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::Ingest(format!(
                "label {label} at row {row} outside 0..{n_classes}"
            )));
        }
        Ok(Self { x, y, n_classes, role })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Dataset restricted to the given row indices (role preserved).
    pub fn subset(&self, indices: &[usize], role: SplitRole) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Shape(format!("subset index {bad} out of range")));
        }
        let d = self.n_features();
        let mut x = Array2::zeros((indices.len(), d));
        let mut y = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).assign(&self.x.row(i));
            y.push(self.y[i]);
        }
        Dataset::new(x, y, self.n_classes, role)
    }
}

/// Per-feature affine normalization fitted on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit per-feature mean/std (population) on `fit`. Zero-variance
    /// features get std 1 so they pass through unscaled.
    pub fn fit(fit: &Dataset) -> Self {
        let n = fit.len() as f64;
        let d = fit.n_features();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for row in fit.x.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for row in fit.x.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                std[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                data.n_features()
            )));
        }
        let mut x = data.x.clone();
        for mut row in x.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Dataset::new(x, data.y.clone(), data.n_classes, data.role)
    }

    pub fn inverse_transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.mean.len() {
            return Err(Error::Shape("standardizer dimension mismatch".into()));
        }
        let mut x = data.x.clone();
        for mut row in x.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Dataset::new(x, data.y.clone(), data.n_classes, data.role)
    }
}

/// Fit normalization stats on `fit` and apply them to `fit` and every
/// dataset in `apply`. Stats never leak from the applied splits.
pub fn standardize(fit: &Dataset, apply: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Standardizer)> {
    let stats = Standardizer::fit(fit);
    let fit_t = stats.transform(fit)?;
    let mut out = Vec::with_capacity(apply.len());
    for d in apply {
        out.push(stats.transform(d)?);
    }
    Ok((fit_t, out, stats))
}

/// Stratified index split over label positions. `fraction` is the first
/// side's share. Both sides come back sorted.
pub(crate) fn stratified_split_indices(
    y: &[usize],
    n_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::Config("cannot split fewer than 2 points".into()));
    }
    let target_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);

    // Shuffle indices within each class.
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        per_class[c].push(i);
    }
    let mut rng = rng::stream_rng(seed, &[0x53504c49]);
    for bucket in per_class.iter_mut() {
        bucket.shuffle(&mut rng);
    }

    // Proportional allocation with largest-remainder balancing so the train
    // side lands exactly on target_train.
    let mut take: Vec<usize> = Vec::with_capacity(n_classes);
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    let mut allocated = 0usize;
    for (c, bucket) in per_class.iter().enumerate() {
        let exact = fraction * bucket.len() as f64;
        let base = (exact.floor() as usize).min(bucket.len());
        take.push(base);
        allocated += base;
        remainders.push((exact - base as f64, c));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut extra = target_train.saturating_sub(allocated);
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if extra == 0 {
            break;
        }
        if take[c] < per_class[c].len() {
            take[c] += 1;
            extra -= 1;
        }
    }
    // Keep each populated class present on both sides when feasible.
    for (c, bucket) in per_class.iter().enumerate() {
        if bucket.len() >= 2 {
            if take[c] == 0 {
                take[c] = 1;
            } else if take[c] == bucket.len() {
                take[c] -= 1;
            }
        }
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (c, bucket) in per_class.iter().enumerate() {
        train_idx.extend_from_slice(&bucket[..take[c]]);
        val_idx.extend_from_slice(&bucket[take[c]..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("split produced an empty side".into()));
    }
    Ok((train_idx, val_idx))
}

/// Seeded stratified train/val split. `fraction` is the train share.
///
/// Class presence is preserved on both sides whenever a class has at least
/// two samples and both sides are large enough to hold one.
pub fn split_train_val(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, val_idx) =
        stratified_split_indices(&dataset.y, dataset.n_classes, fraction, seed)?;
    let train = dataset.subset(&train_idx, SplitRole::SourceTrain)?;
    let val = dataset.subset(&val_idx, SplitRole::SourceVal)?;
    Ok((train, val))
}

/// Exact record of how a dataset was carved into splits, written next to
/// results so a split can be reproduced without rerunning the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub parameters: serde_json::Value,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy(n: usize, k: usize) -> Dataset {
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let y = (0..n).map(|i| i % k).collect();
        Dataset::new(x, y, k, SplitRole::Unsplit).unwrap()
    }

    #[test]
    fn rejects_bad_labels_and_nan() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 5], 2, SplitRole::Unsplit),
            Err(Error::Ingest(_))
        ));
        let bad = array![[1.0, f64::NAN]];
        assert!(Dataset::new(bad, vec![0], 2, SplitRole::Unsplit).is_err());
    }

    #[test]
    fn standardize_fit_split_is_zero_mean_unit_std() {
        let data = toy(50, 2);
        let (fit_t, _, stats) = standardize(&data, &[]).unwrap();
        for j in 0..fit_t.n_features() {
            let col: Vec<f64> = fit_t.x.column(j).to_vec();
            let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(stats.mean.len(), 2);
    }

    #[test]
    fn constant_feature_passes_through() {
        let x = array![[3.0, 1.0], [3.0, 2.0], [3.0, 6.0]];
        let data = Dataset::new(x, vec![0, 1, 0], 2, SplitRole::Unsplit).unwrap();
        let stats = Standardizer::fit(&data);
        let t = stats.transform(&data).unwrap();
        for v in t.x.column(0) {
            assert_eq!(*v, 0.0); // (3-3)/1
        }
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn standardize_round_trip_recovers_originals() {
        let fit = toy(40, 2);
        let other = toy(12, 2);
        let stats = Standardizer::fit(&fit);
        let t = stats.transform(&other).unwrap();
        let back = stats.inverse_transform(&t).unwrap();
        for (a, b) in other.x.iter().zip(back.x.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let data = toy(10, 2);
        let (tr, va) = split_train_val(&data, 0.5, 3).unwrap();
        assert_eq!(tr.len(), 5);
        assert_eq!(va.len(), 5);
        let (tr2, _) = split_train_val(&data, 0.5, 3).unwrap();
        assert_eq!(tr.y, tr2.y);
        assert_eq!(tr.x, tr2.x);
        // union of split sizes covers everything
        assert_eq!(tr.len() + va.len(), data.len());
    }

    #[test]
    fn split_keeps_classes_on_both_sides() {
        let data = toy(20, 4);
        let (tr, va) = split_train_val(&data, 0.8, 0).unwrap();
        for c in 0..4 {
            assert!(tr.y.contains(&c));
            assert!(va.y.contains(&c));
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let data = toy(10, 2);
        assert!(split_train_val(&data, 0.0, 0).is_err());
        assert!(split_train_val(&data, 1.0, 0).is_err());
    }
}
