//! Checkpoint-ensemble state and deep-ensemble probability aggregation.
//!
//! The checkpoint ensemble never stores weights: it keeps a running mean of
//! softmax output matrices on the (fixed) test set plus a checkpoint
//! counter. The mean is order-free, so parallel members may contribute
//! checkpoints in any interleaving as long as updates are serialized.

use ndarray::Array2;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::argmax_row;

/// Running average `P` of checkpoint softmax outputs with checkpoint count.
#[derive(Debug, Clone)]
pub struct CheckpointEnsemble {
    probs: Array2<f64>,
    count: usize,
}

/// Argmax labels, confidences and margins of an averaged probability
/// matrix.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub margin: Vec<f64>,
}

impl CheckpointEnsemble {
    /// Empty state over `n` test points and `k` classes.
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            probs: Array2::zeros((n, k)),
            count: 0,
        }
    }

    pub fn n_points(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn n_checkpoints(&self) -> usize {
        self.count
    }

    /// The averaged probability matrix (all zeros while empty).
    pub fn mean_probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Drop all recorded checkpoints: count back to zero, matrix to zeros.
    pub fn reset(&mut self) {
        self.probs.fill(0.0);
        self.count = 0;
    }

    /// Fold one checkpoint's softmax outputs into the running mean.
    pub fn update(&mut self, checkpoint_probs: &Array2<f64>) -> Result<()> {
        if checkpoint_probs.dim() != self.probs.dim() {
            return Err(Error::Shape(format!(
                "checkpoint outputs are {:?}, ensemble state is {:?}",
                checkpoint_probs.dim(),
                self.probs.dim()
            )));
        }
        let n_e = self.count as f64;
        self.probs.zip_mut_with(checkpoint_probs, |p, &q| {
            *p = (*p * n_e + q) / (n_e + 1.0);
        });
        self.count += 1;
        Ok(())
    }

    /// Per-point argmax label (ties to the lowest class index), confidence
    /// `max_k P_ik`, and margin (top minus second probability).
    pub fn predict(&self) -> Result<EnsemblePrediction> {
        if self.count == 0 {
            return Err(Error::EmptyEnsemble);
        }
        Ok(predict_from_probs(&self.probs))
    }

    /// Dump `P` and the checkpoint count as CSV for external tooling.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# n_checkpoints={}", self.count)?;
        let header: Vec<String> = (0..self.n_classes()).map(|k| format!("p{k}")).collect();
        writeln!(file, "{}", header.join(","))?;
        for row in self.probs.outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Labels/confidence/margin of any row-stochastic probability matrix.
pub fn predict_from_probs(probs: &Array2<f64>) -> EnsemblePrediction {
    let n = probs.nrows();
    let k = probs.ncols();
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut margin = Vec::with_capacity(n);
    for row in probs.outer_iter() {
        let row_vec = row.to_vec();
        let best = argmax_row(&row_vec);
        let top = row_vec[best];
        let second = row_vec
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        labels.push(best);
        confidence.push(top);
        margin.push(if k > 1 { top - second } else { top });
    }
    EnsemblePrediction {
        labels,
        confidence,
        margin,
    }
}

/// Elementwise mean of member probability matrices (the deep-ensemble
/// predictive distribution).
pub fn deep_ensemble_probs(member_probs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = member_probs
        .first()
        .ok_or_else(|| Error::Config("deep ensemble needs at least one member".into()))?;
    let mut mean = Array2::zeros(first.dim());
    for m in member_probs {
        if m.dim() != first.dim() {
            return Err(Error::Shape(format!(
                "member output {:?} disagrees with {:?}",
                m.dim(),
                first.dim()
            )));
        }
        mean += m;
    }
    mean /= member_probs.len() as f64;
    Ok(mean)
}
