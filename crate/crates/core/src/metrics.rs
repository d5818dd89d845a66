//! Selective-prediction metrics over (score, correctness, selected) triples.
//!
//! Points selected for labeling never enter a numerator or denominator;
//! the only exception is the `cov*` variant whose denominator is the full
//! test size. Thresholds accept with `g >= tau`, the sweep visits every
//! distinct score plus both infinities, and the empty acceptance set has
//! accuracy 1 by convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence threshold at which all metric conventions hold trivially.
const CONFIDENCE_ONE: f64 = 1.0 - 1e-12;

/// Evaluation data for one selective classifier on one test set.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    scores: Vec<f64>,
    correct: Vec<bool>,
    selected: Vec<bool>,
}

/// One point of the accuracy-coverage curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub coverage: f64,
    pub accuracy: f64,
    /// Coverage normalized by the full test size (selected included).
    pub coverage_star: f64,
}

impl EvalFrame {
    pub fn new(scores: Vec<f64>, correct: Vec<bool>, selected: Vec<bool>) -> Result<Self> {
        if scores.len() != correct.len() || scores.len() != selected.len() {
            return Err(Error::Shape(format!(
                "frame fields disagree: {} scores, {} correct, {} selected",
                scores.len(),
                correct.len(),
                selected.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::DegenerateFrame("frame is empty".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite confidence score".into()));
        }
        if selected.iter().all(|&s| s) {
            return Err(Error::DegenerateFrame(
                "every point was selected for labeling; coverage is undefined".into(),
            ));
        }
        Ok(Self {
            scores,
            correct,
            selected,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn correct(&self) -> &[bool] {
        &self.correct
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    fn unselected(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.scores
            .iter()
            .zip(&self.correct)
            .zip(&self.selected)
            .filter(|&((_, _), &sel)| !sel)
            .map(|((&s, &c), _)| (s, c))
    }

    /// Accuracy and coverage of the selective classifier at threshold
    /// `tau` (accept when `g >= tau`). Empty acceptance has accuracy 1.
    pub fn acc_cov_at_threshold(&self, tau: f64) -> (f64, f64) {
        let mut unsel = 0usize;
        let mut accepted = 0usize;
        let mut accepted_correct = 0usize;
        for (s, c) in self.unselected() {
            unsel += 1;
            if s >= tau {
                accepted += 1;
                if c {
                    accepted_correct += 1;
                }
            }
        }
        let acc = if accepted == 0 {
            1.0
        } else {
            accepted_correct as f64 / accepted as f64
        };
        (acc, accepted as f64 / unsel as f64)
    }

    /// The accuracy-coverage curve: one point per distinct score plus the
    /// two infinite thresholds, ordered by descending `tau` (coverage
    /// ascending from 0 to 1).
    pub fn sweep(&self) -> Vec<SweepPoint> {
        let n_total = self.len() as f64;
        let mut pts: Vec<(f64, bool)> = self.unselected().collect();
        let n_unsel = pts.len() as f64;
        pts.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        let mut out = Vec::with_capacity(pts.len() + 2);
        out.push(SweepPoint {
            tau: f64::INFINITY,
            coverage: 0.0,
            accuracy: 1.0,
            coverage_star: 0.0,
        });
        let mut accepted = 0usize;
        let mut correct = 0usize;
        let mut i = 0;
        while i < pts.len() {
            let tau = pts[i].0;
            // tied scores are accepted together
            while i < pts.len() && pts[i].0 == tau {
                accepted += 1;
                if pts[i].1 {
                    correct += 1;
                }
                i += 1;
            }
            out.push(SweepPoint {
                tau,
                coverage: accepted as f64 / n_unsel,
                accuracy: correct as f64 / accepted as f64,
                coverage_star: accepted as f64 / n_total,
            });
        }
        // -inf accepts the same set as the minimum score; kept as the
        // explicit full-coverage endpoint.
        let last = *out.last().unwrap();
        out.push(SweepPoint {
            tau: f64::NEG_INFINITY,
            coverage: 1.0,
            accuracy: last.accuracy,
            coverage_star: last.coverage_star,
        });
        out
    }

    /// Maximum accuracy among thresholds with coverage at least `t_c`.
    pub fn max_acc_at_coverage(&self, t_c: f64) -> f64 {
        self.sweep()
            .iter()
            .filter(|p| p.coverage >= t_c)
            .map(|p| p.accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Maximum coverage among thresholds with accuracy at least `t_a`;
    /// 0 when only the empty-acceptance threshold qualifies.
    pub fn max_cov_at_accuracy(&self, t_a: f64) -> f64 {
        self.sweep()
            .iter()
            .filter(|p| p.accuracy >= t_a)
            .map(|p| p.coverage)
            .fold(0.0, f64::max)
    }

    /// Like [`EvalFrame::max_cov_at_accuracy`] but with coverage measured
    /// against the full test size, bounding the value by `1 - M/n`.
    pub fn cov_star_at_accuracy(&self, t_a: f64) -> f64 {
        self.sweep()
            .iter()
            .filter(|p| p.accuracy >= t_a)
            .map(|p| p.coverage_star)
            .fold(0.0, f64::max)
    }

    /// Area under the accuracy-coverage curve by the composite trapezoidal
    /// rule over the threshold sweep.
    pub fn auacc(&self) -> f64 {
        let sweep = self.sweep();
        let mut area = 0.0;
        for pair in sweep.windows(2) {
            area += (pair[1].coverage - pair[0].coverage) * (pair[0].accuracy + pair[1].accuracy)
                / 2.0;
        }
        area
    }

    /// Probability that a random correctly classified unselected point
    /// outscores a random misclassified one (ties count half).
    pub fn auroc(&self) -> Result<f64> {
        let pts: Vec<(f64, bool)> = self.unselected().collect();
        let n_correct = pts.iter().filter(|(_, c)| *c).count();
        let n_incorrect = pts.len() - n_correct;
        if n_correct == 0 || n_incorrect == 0 {
            return Err(Error::UndefinedMetric(
                "AUROC needs both correct and incorrect unselected points".into(),
            ));
        }
        // Mann-Whitney via average ranks over the pooled scores.
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_unstable_by(|&a, &b| pts[a].0.partial_cmp(&pts[b].0).unwrap());
        let mut rank_sum_correct = 0.0;
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j < order.len() && pts[order[j]].0 == pts[order[i]].0 {
                j += 1;
            }
            // ranks are 1-based; tied group shares the average rank
            let avg_rank = (i + 1 + j) as f64 / 2.0;
            for &idx in &order[i..j] {
                if pts[idx].1 {
                    rank_sum_correct += avg_rank;
                }
            }
            i = j;
        }
        let u = rank_sum_correct - (n_correct * (n_correct + 1)) as f64 / 2.0;
        Ok(u / (n_correct as f64 * n_incorrect as f64))
    }

    /// Fraction of misclassified unselected points carrying (numerically)
    /// full confidence.
    pub fn overconfidence_ratio(&self) -> Result<f64> {
        let mut misclassified = 0usize;
        let mut overconfident = 0usize;
        for (s, c) in self.unselected() {
            if !c {
                misclassified += 1;
                if s >= CONFIDENCE_ONE {
                    overconfident += 1;
                }
            }
        }
        if misclassified == 0 {
            return Err(Error::UndefinedMetric(
                "overconfidence ratio needs at least one misclassified point".into(),
            ));
        }
        Ok(overconfident as f64 / misclassified as f64)
    }

    /// Raw accuracy on the unselected points (the `tau = -inf` endpoint).
    pub fn raw_accuracy(&self) -> f64 {
        let mut n = 0usize;
        let mut correct = 0usize;
        for (_, c) in self.unselected() {
            n += 1;
            if c {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }
}

/// The metric family evaluated at the configured targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBundle {
    /// Accuracy of the classifier on unselected points (coverage 1).
    pub accuracy: f64,
    /// Maximum accuracy at coverage >= `target_coverage`.
    pub acc_at_coverage: f64,
    /// Maximum coverage at accuracy >= `target_accuracy`.
    pub cov_at_accuracy: f64,
    pub auacc: f64,
    /// cov* at accuracy >= `target_accuracy` (denominator is the full test size).
    pub cov_star_at_accuracy: f64,
    /// None when the frame has no misclassified or no correct points.
    pub auroc: Option<f64>,
    /// None when the frame has no misclassified points.
    pub overconfidence_ratio: Option<f64>,
}

impl MetricBundle {
    pub fn compute(frame: &EvalFrame, target_accuracy: f64, target_coverage: f64) -> Self {
        Self {
            accuracy: frame.raw_accuracy(),
            acc_at_coverage: frame.max_acc_at_coverage(target_coverage),
            cov_at_accuracy: frame.max_cov_at_accuracy(target_accuracy),
            auacc: frame.auacc(),
            cov_star_at_accuracy: frame.cov_star_at_accuracy(target_accuracy),
            auroc: frame.auroc().ok(),
            overconfidence_ratio: frame.overconfidence_ratio().ok(),
        }
    }

    /// Metric values in a fixed presentation order, paired with names.
    pub fn named_values(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("acc_at_coverage", Some(self.acc_at_coverage)),
            ("cov_at_accuracy", Some(self.cov_at_accuracy)),
            ("auacc", Some(self.auacc)),
            ("cov_star_at_accuracy", Some(self.cov_star_at_accuracy)),
            ("auroc", self.auroc),
            ("overconfidence_ratio", self.overconfidence_ratio),
        ]
    }
}
