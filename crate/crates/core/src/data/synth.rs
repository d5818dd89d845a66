//! Synthetic Gaussian-mixture benchmark with a controllable distribution
//! shift between source and target.
//!
//! Source: K Gaussian blobs with per-feature scales. Target: the same blobs
//! with every class mean translated along its own seeded random direction
//! and the (shared) covariance rotated, so a source-trained model degrades
//! in a way controlled by `shift_magnitude`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{stratified_split_indices, Dataset, SplitManifest, SplitRole};
use crate::error::{Error, Result};
use crate::rng;

/// Root-mean-square distance between class means, in noise units.
const MEAN_SEPARATION: f64 = 3.5;

/// Shift magnitude at which the target covariance is fully rotated.
const FULL_ROTATION_SHIFT: f64 = 4.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthShiftSpec {
    pub n_classes: usize,
    pub n_features: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Distance each class mean travels between source and target.
    pub shift_magnitude: f64,
    /// Share of the source block held out as the validation split.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn sample_unit_vector(d: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Random rotation via Gram-Schmidt on Gaussian columns.
fn sample_rotation(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        for b in &basis {
            let proj = v.dot(b);
            v = v - b * proj;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    let mut r = Array2::zeros((d, d));
    for (j, b) in basis.iter().enumerate() {
        r.column_mut(j).assign(b);
    }
    r
}

/// Generate the shifted-mixture benchmark: `(source_train, source_val,
/// target_test, manifest)`. Deterministic per `(spec, seed)`.
pub fn synth_gaussian_shift(
    spec: &SynthShiftSpec,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, SplitManifest)> {
    if spec.n_classes < 2 {
        return Err(Error::Config("synthetic benchmark needs >= 2 classes".into()));
    }
    if spec.n_features == 0 || spec.n_source < 2 * spec.n_classes || spec.n_target == 0 {
        return Err(Error::Config(
            "synthetic benchmark needs n_features >= 1, n_source >= 2K, n_target >= 1".into(),
        ));
    }
    if spec.shift_magnitude < 0.0 {
        return Err(Error::Config("shift_magnitude must be >= 0".into()));
    }
    let k = spec.n_classes;
    let d = spec.n_features;

    let mut geom_rng = rng::stream_rng(seed, &[1]);
    let mean_scale = MEAN_SEPARATION / (2.0 * d as f64).sqrt();
    let means: Vec<Array1<f64>> = (0..k)
        .map(|_| Array1::from_shape_fn(d, |_| geom_rng.sample::<f64, _>(StandardNormal) * mean_scale))
        .collect();
    let scales = Array1::from_shape_fn(d, |_| geom_rng.random_range(0.3..1.8));
    let shift_dirs: Vec<Array1<f64>> = (0..k).map(|_| sample_unit_vector(d, &mut geom_rng)).collect();
    let rotation = sample_rotation(d, &mut geom_rng);

    let shifted_means: Vec<Array1<f64>> = means
        .iter()
        .zip(&shift_dirs)
        .map(|(m, dir)| m + &(dir * spec.shift_magnitude))
        .collect();

    // Rotation strength follows the shift so that shift 0 reproduces the
    // source distribution exactly and shifts of 4+ noise units get the
    // fully rotated covariance.
    let strength = (spec.shift_magnitude / FULL_ROTATION_SHIFT).clamp(0.0, 1.0);
    let mut target_transform = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let blended = strength * rotation[[i, j]] + if i == j { 1.0 - strength } else { 0.0 };
            target_transform[[i, j]] = blended * scales[j];
        }
    }

    let sample_block = |n: usize,
                        mean_set: &[Array1<f64>],
                        transform: Option<&Array2<f64>>,
                        rng: &mut rand_chacha::ChaCha8Rng| {
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            let z = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let noise = match transform {
                Some(m) => m.dot(&z),
                None => &z * &scales,
            };
            x.row_mut(i).assign(&(&mean_set[c] + &noise));
            y.push(c);
        }
        (x, y)
    };

    let mut src_rng = rng::stream_rng(seed, &[2]);
    let (src_x, src_y) = sample_block(spec.n_source, &means, None, &mut src_rng);
    let mut tgt_rng = rng::stream_rng(seed, &[3]);
    let (tgt_x, tgt_y) = sample_block(spec.n_target, &shifted_means, Some(&target_transform), &mut tgt_rng);

    let source = Dataset::new(src_x, src_y, k, SplitRole::Unsplit)?;
    let test = Dataset::new(tgt_x, tgt_y, k, SplitRole::TargetTest)?;

    let (train_idx, val_idx) = stratified_split_indices(
        &source.y,
        k,
        1.0 - spec.val_fraction,
        rng::derive_seed(seed, &[4]),
    )?;
    let train = source.subset(&train_idx, SplitRole::SourceTrain)?;
    let val = source.subset(&val_idx, SplitRole::SourceVal)?;

    let manifest = SplitManifest {
        seed,
        parameters: json!({
            "kind": "synth_gaussian_shift",
            "n_classes": k,
            "n_features": d,
            "n_source": spec.n_source,
            "n_target": spec.n_target,
            "shift_magnitude": spec.shift_magnitude,
            "val_fraction": spec.val_fraction,
        }),
        train_indices: train_idx,
        val_indices: val_idx,
        test_indices: (spec.n_source..spec.n_source + spec.n_target).collect(),
    };
    Ok((train, val, test, manifest))
}
