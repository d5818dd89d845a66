//! End-to-end active selective prediction: softmax response (SR), deep
//! ensembles (DE), and the checkpoint-ensemble + self-training method
//! (ASPEST), plus source training and the simulated labeling oracle.
//!
//! All three methods share the round structure: select a batch of
//! `floor(M/T)` test points, obtain ground-truth labels from the oracle,
//! and fine-tune on all labels collected so far jointly with the source
//! set. They differ in the scoring function and in what happens around
//! fine-tuning.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    badge_select, clue_select, k_center_greedy, select_top_m, select_uniform, uncertainty_score,
    Direction, ScoreRule, SelectionState,
};
use crate::data::Dataset;
use crate::ensemble::{deep_ensemble_probs, predict_from_probs, CheckpointEnsemble};
use crate::error::{Error, Result};
use crate::metrics::{EvalFrame, MetricBundle};
use crate::nn::{
    sgd_train, train_source_steps, LabeledSet, LossKind, MlpModel, ModelSpec, Optimizer,
    TrainConfig,
};
use crate::rng::derive_seed;

const TAG_MEMBER: u64 = 0x4d454d42;
const TAG_SELECT: u64 = 0x53454c43;
const TAG_FINE: u64 = 0x46494e45;
const TAG_SELF: u64 = 0x53454c46;
const TAG_SUBSAMPLE: u64 = 0x53554253;
const TAG_SOURCE: u64 = 0x53524354;

/// Ground-truth labels behind a budgeted, relabel-checked interface.
#[derive(Debug, Clone)]
pub struct LabelOracle {
    truth: Vec<usize>,
    labeled: Vec<bool>,
    used: usize,
    budget: usize,
}

impl LabelOracle {
    pub fn new(truth: Vec<usize>, budget: usize) -> Self {
        let n = truth.len();
        Self {
            truth,
            labeled: vec![false; n],
            used: 0,
            budget,
        }
    }

    /// Reveal labels for previously unlabeled indices, consuming budget.
    pub fn label(&mut self, indices: &[usize]) -> Result<Vec<usize>> {
        if self.used + indices.len() > self.budget {
            return Err(Error::Protocol(format!(
                "labeling {} points would exceed budget {} (used {})",
                indices.len(),
                self.budget,
                self.used
            )));
        }
        for &i in indices {
            if i >= self.truth.len() {
                return Err(Error::Protocol(format!("index {i} outside test set")));
            }
            if self.labeled[i] {
                return Err(Error::Protocol(format!("index {i} was already labeled")));
            }
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            self.labeled[i] = true;
            out.push(self.truth[i]);
        }
        self.used += indices.len();
        Ok(out)
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn budget(&self) -> usize {
        self.budget
    }
}

/// Acquisition strategy used by SR and DE rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    Uniform,
    Confidence,
    Entropy,
    Margin,
    AvgKld,
    Kcg,
    Clue,
    Badge,
}

/// ASPEST hyper-parameters (defaults follow the method's reference values).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AspestConfig {
    /// Weight of the source term in the joint objectives.
    pub lambda: f64,
    /// Source-only fine-tuning steps before the first round (n_s).
    pub initial_steps: usize,
    /// Ensemble size N.
    pub n_members: usize,
    /// Active-learning rounds T.
    pub rounds: usize,
    /// Checkpoint interval in steps during initial fine-tuning (c_s).
    pub ckpt_steps: usize,
    /// Checkpoint interval in epochs during fine-tuning/self-training (c_e).
    pub ckpt_epochs: usize,
    /// Fraction p of the test set bounding the self-training subset size.
    pub subsample_fraction: f64,
    /// Confidence threshold eta for pseudo-labeling.
    pub pseudo_label_threshold: f64,
    pub self_train_epochs: usize,
}

impl Default for AspestConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            initial_steps: 1000,
            n_members: 5,
            rounds: 10,
            ckpt_steps: 200,
            ckpt_epochs: 5,
            subsample_fraction: 0.1,
            pseudo_label_threshold: 0.9,
            self_train_epochs: 20,
        }
    }
}

impl AspestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_fraction must be in (0,1], got {}",
                self.subsample_fraction
            )));
        }
        if !(self.pseudo_label_threshold > 0.0 && self.pseudo_label_threshold < 1.0) {
            return Err(Error::Config(format!(
                "pseudo_label_threshold must be in (0,1), got {}",
                self.pseudo_label_threshold
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        for (name, v) in [
            ("initial_steps", self.initial_steps),
            ("n_members", self.n_members),
            ("rounds", self.rounds),
            ("ckpt_steps", self.ckpt_steps),
            ("ckpt_epochs", self.ckpt_epochs),
            ("self_train_epochs", self.self_train_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Metric evaluation targets (t_a, t_c).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricTargets {
    pub accuracy: f64,
    pub coverage: f64,
}

impl Default for MetricTargets {
    fn default() -> Self {
        Self {
            accuracy: 0.8,
            coverage: 0.8,
        }
    }
}

/// Per-round record: what was labeled and how the predictor looked
/// afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub selected_indices: Vec<usize>,
    /// Accuracy of the (deep-)ensemble classifier on the still-unlabeled
    /// test points after this round.
    pub ensemble_accuracy: f64,
    pub metrics: MetricBundle,
}

/// Shared result of one end-to-end run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub frame: EvalFrame,
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
    pub rounds: Vec<RoundLog>,
    pub labels_used: usize,
}

pub struct SrRun {
    pub model: MlpModel,
    pub outcome: RunOutcome,
}

pub struct DeRun {
    pub members: Vec<MlpModel>,
    pub outcome: RunOutcome,
}

pub struct AspestRun {
    pub ensemble: CheckpointEnsemble,
    pub outcome: RunOutcome,
}

/// Train a fresh model on the source set with cross-entropy.
pub fn source_train(
    spec: &ModelSpec,
    source: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    optimizer: Optimizer,
    seed: u64,
) -> Result<MlpModel> {
    if source.is_empty() {
        return Err(Error::Config("source training set is empty".into()));
    }
    let mut model = spec.build(source.n_features(), source.n_classes, seed)?;
    crate::nn::train_source_epochs(
        &mut model,
        source,
        epochs,
        learning_rate,
        batch_size,
        optimizer,
        derive_seed(seed, &[TAG_SOURCE]),
    )?;
    Ok(model)
}

fn check_run_preconditions(target: &Dataset, budget: usize, rounds: usize) -> Result<()> {
    if budget >= target.len() {
        return Err(Error::Config(format!(
            "budget {budget} must leave unlabeled points in a pool of {}",
            target.len()
        )));
    }
    if budget > 0 && rounds == 0 {
        return Err(Error::Config("a positive budget needs at least one round".into()));
    }
    if budget > 0 && budget < rounds {
        return Err(Error::Config(format!(
            "budget {budget} is smaller than the number of rounds {rounds}"
        )));
    }
    Ok(())
}

fn gather_rows(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    crate::nn::gather_rows(x, idx)
}

/// Horizontal concatenation of per-member matrices (member index
/// ascending).
fn concat_members(mats: &[Array2<f64>]) -> Array2<f64> {
    let n = mats[0].nrows();
    let width: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = Array2::zeros((n, width));
    let mut col = 0;
    for m in mats {
        out.slice_mut(ndarray::s![.., col..col + m.ncols()]).assign(m);
        col += m.ncols();
    }
    out
}

/// One acquisition decision on the current ensemble state.
#[allow(clippy::too_many_arguments)]
fn select_batch(
    kind: AcquisitionKind,
    members: &[MlpModel],
    target_x: &ArrayView2<f64>,
    state: &SelectionState,
    m: usize,
    clue_temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    match kind {
        AcquisitionKind::Uniform => select_uniform(state, m, seed),
        AcquisitionKind::Confidence | AcquisitionKind::Entropy | AcquisitionKind::Margin
        | AcquisitionKind::AvgKld => {
            let probs: Vec<Array2<f64>> = members
                .iter()
                .map(|f| f.predict_probs(target_x))
                .collect::<Result<_>>()?;
            let (rule, direction) = match kind {
                AcquisitionKind::Confidence => (ScoreRule::Confidence, Direction::Lowest),
                AcquisitionKind::Entropy => (ScoreRule::Entropy, Direction::Highest),
                AcquisitionKind::Margin => (ScoreRule::Margin, Direction::Lowest),
                AcquisitionKind::AvgKld => (ScoreRule::AvgKld, Direction::Highest),
                _ => unreachable!(),
            };
            let scores = uncertainty_score(&probs, rule)?;
            select_top_m(&scores, direction, state, m, seed)
        }
        AcquisitionKind::Kcg => {
            let embs: Vec<Array2<f64>> = members
                .iter()
                .map(|f| f.forward(target_x).map(|o| o.embedding))
                .collect::<Result<_>>()?;
            k_center_greedy(&concat_members(&embs).view(), state, m, seed)
        }
        AcquisitionKind::Clue => {
            let mut probs = Vec::with_capacity(members.len());
            let mut embs = Vec::with_capacity(members.len());
            for f in members {
                let out = f.forward(target_x)?;
                probs.push(out.probs);
                embs.push(out.embedding);
            }
            let mean = deep_ensemble_probs(&probs)?;
            clue_select(
                &concat_members(&embs).view(),
                &mean,
                clue_temperature,
                state,
                m,
                seed,
            )
        }
        AcquisitionKind::Badge => {
            let grads: Vec<Array2<f64>> = members
                .iter()
                .map(|f| f.gradient_embedding(target_x))
                .collect::<Result<_>>()?;
            badge_select(&concat_members(&grads).view(), state, m, seed)
        }
    }
}

/// Frame + metric bundle + unlabeled accuracy from an averaged probability
/// matrix.
fn evaluate_probs(
    probs: &Array2<f64>,
    target: &Dataset,
    selected: &[bool],
    targets: &MetricTargets,
) -> Result<(EvalFrame, Vec<usize>, Vec<f64>, MetricBundle)> {
    let pred = predict_from_probs(probs);
    let correct: Vec<bool> = pred
        .labels
        .iter()
        .zip(&target.y)
        .map(|(&p, &y)| p == y)
        .collect();
    let frame = EvalFrame::new(pred.confidence.clone(), correct, selected.to_vec())?;
    let bundle = MetricBundle::compute(&frame, targets.accuracy, targets.coverage);
    Ok((frame, pred.labels, pred.confidence, bundle))
}

fn unlabeled_accuracy(predictions: &[usize], target: &Dataset, selected: &[bool]) -> f64 {
    let mut n = 0usize;
    let mut correct = 0usize;
    for i in 0..target.len() {
        if !selected[i] {
            n += 1;
            if predictions[i] == target.y[i] {
                correct += 1;
            }
        }
    }
    correct as f64 / n.max(1) as f64
}

/// Softmax Response with active learning: a single model fine-tuned each
/// round on all labels so far (jointly with the source set); the selective
/// score is its maximum softmax probability.
#[allow(clippy::too_many_arguments)]
pub fn run_sr(
    source_model: &MlpModel,
    source: &Dataset,
    target: &Dataset,
    acquisition: AcquisitionKind,
    budget: usize,
    rounds: usize,
    train_cfg: &TrainConfig,
    clue_temperature: f64,
    metric_targets: &MetricTargets,
    seed: u64,
) -> Result<SrRun> {
    check_run_preconditions(target, budget, rounds)?;
    train_cfg.validate()?;
    let n = target.len();
    let mut state = SelectionState::new(n, budget, rounds)?;
    let mut oracle = LabelOracle::new(target.y.clone(), budget);
    let mut model = source_model.clone();
    model.reseed_dropout(derive_seed(seed, &[TAG_MEMBER, 0]));

    let mut labeled_idx: Vec<usize> = Vec::new();
    let mut labeled_y: Vec<usize> = Vec::new();
    let mut round_logs = Vec::new();
    let m = state.per_round();

    if m > 0 {
        for t in 1..=rounds {
            let batch = select_batch(
                acquisition,
                std::slice::from_ref(&model),
                &target.x.view(),
                &state,
                m,
                clue_temperature,
                derive_seed(seed, &[TAG_SELECT, t as u64]),
            )?;
            let batch_labels = oracle.label(&batch)?;
            state.mark_selected(&batch)?;
            labeled_idx.extend_from_slice(&batch);
            labeled_y.extend_from_slice(&batch_labels);

            let labeled_x = gather_rows(&target.x.view(), &labeled_idx);
            let set = LabeledSet::hard(labeled_x.view(), &labeled_y);
            sgd_train(
                &mut model,
                &set,
                LossKind::CrossEntropy,
                Some(source),
                train_cfg,
                derive_seed(seed, &[TAG_FINE, t as u64, 0]),
                0,
                |_| {},
            )?;

            let probs = model.predict_probs(&target.x.view())?;
            let (_, predictions, _, bundle) =
                evaluate_probs(&probs, target, state.selected_mask(), metric_targets)?;
            round_logs.push(RoundLog {
                round: t,
                selected_indices: batch,
                ensemble_accuracy: unlabeled_accuracy(&predictions, target, state.selected_mask()),
                metrics: bundle,
            });
        }
    }

    let probs = model.predict_probs(&target.x.view())?;
    let (frame, predictions, scores, _) =
        evaluate_probs(&probs, target, state.selected_mask(), metric_targets)?;
    Ok(SrRun {
        model,
        outcome: RunOutcome {
            frame,
            predictions,
            scores,
            rounds: round_logs,
            labels_used: oracle.used(),
        },
    })
}

/// Clone the source model into `n_members` members with independent
/// dropout/data-order randomness, then fine-tune each on the source set
/// for `initial_steps` steps. `hook` observes each member after its
/// initial fine-tuning has recorded any step checkpoints.
#[allow(clippy::too_many_arguments)]
fn init_members(
    source_model: &MlpModel,
    source: &Dataset,
    n_members: usize,
    initial_steps: usize,
    train_cfg: &TrainConfig,
    seed: u64,
    ckpt_steps: usize,
    mut step_hook: impl FnMut(&MlpModel) -> Result<()>,
) -> Result<Vec<MlpModel>> {
    let mut members = Vec::with_capacity(n_members);
    for j in 0..n_members {
        let mut member = source_model.clone();
        member.reseed_dropout(derive_seed(seed, &[TAG_MEMBER, j as u64]));
        if initial_steps > 0 {
            let mut hook_err = None;
            train_source_steps(
                &mut member,
                source,
                initial_steps,
                train_cfg.learning_rate,
                train_cfg.batch_size,
                train_cfg.optimizer,
                derive_seed(seed, &[TAG_MEMBER, j as u64, 1]),
                ckpt_steps,
                |m| {
                    if hook_err.is_none() {
                        if let Err(e) = step_hook(m) {
                            hook_err = Some(e);
                        }
                    }
                },
            )?;
            if let Some(e) = hook_err {
                return Err(e);
            }
        }
        members.push(member);
    }
    Ok(members)
}

/// Deep Ensembles with active learning: N members initialized from the
/// source model, independently fine-tuned, scored by their mean softmax.
#[allow(clippy::too_many_arguments)]
pub fn run_de(
    source_model: &MlpModel,
    source: &Dataset,
    target: &Dataset,
    acquisition: AcquisitionKind,
    budget: usize,
    rounds: usize,
    n_members: usize,
    initial_steps: usize,
    train_cfg: &TrainConfig,
    clue_temperature: f64,
    metric_targets: &MetricTargets,
    seed: u64,
) -> Result<DeRun> {
    check_run_preconditions(target, budget, rounds)?;
    train_cfg.validate()?;
    if n_members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let n = target.len();
    let mut state = SelectionState::new(n, budget, rounds)?;
    let mut oracle = LabelOracle::new(target.y.clone(), budget);
    let mut members = init_members(
        source_model,
        source,
        n_members,
        initial_steps,
        train_cfg,
        seed,
        0,
        |_| Ok(()),
    )?;

    let mut labeled_idx: Vec<usize> = Vec::new();
    let mut labeled_y: Vec<usize> = Vec::new();
    let mut round_logs = Vec::new();
    let m = state.per_round();

    if m > 0 {
        for t in 1..=rounds {
            let batch = select_batch(
                acquisition,
                &members,
                &target.x.view(),
                &state,
                m,
                clue_temperature,
                derive_seed(seed, &[TAG_SELECT, t as u64]),
            )?;
            let batch_labels = oracle.label(&batch)?;
            state.mark_selected(&batch)?;
            labeled_idx.extend_from_slice(&batch);
            labeled_y.extend_from_slice(&batch_labels);

            let labeled_x = gather_rows(&target.x.view(), &labeled_idx);
            for (j, member) in members.iter_mut().enumerate() {
                let set = LabeledSet::hard(labeled_x.view(), &labeled_y);
                sgd_train(
                    member,
                    &set,
                    LossKind::CrossEntropy,
                    Some(source),
                    train_cfg,
                    derive_seed(seed, &[TAG_FINE, t as u64, j as u64]),
                    0,
                    |_| {},
                )?;
            }

            let probs = member_mean_probs(&members, target)?;
            let (_, predictions, _, bundle) =
                evaluate_probs(&probs, target, state.selected_mask(), metric_targets)?;
            round_logs.push(RoundLog {
                round: t,
                selected_indices: batch,
                ensemble_accuracy: unlabeled_accuracy(&predictions, target, state.selected_mask()),
                metrics: bundle,
            });
        }
    }

    let probs = member_mean_probs(&members, target)?;
    let (frame, predictions, scores, _) =
        evaluate_probs(&probs, target, state.selected_mask(), metric_targets)?;
    Ok(DeRun {
        members,
        outcome: RunOutcome {
            frame,
            predictions,
            scores,
            rounds: round_logs,
            labels_used: oracle.used(),
        },
    })
}

fn member_mean_probs(members: &[MlpModel], target: &Dataset) -> Result<Array2<f64>> {
    let probs: Vec<Array2<f64>> = members
        .iter()
        .map(|f| f.predict_probs(&target.x.view()))
        .collect::<Result<_>>()?;
    deep_ensemble_probs(&probs)
}

/// The pseudo-labeled set: every test point whose checkpoint-ensemble
/// confidence lies in `[threshold, 1)`, paired with its full soft row.
/// Confidence exactly 1 is excluded.
pub fn build_pseudo_label_set(
    ensemble: &CheckpointEnsemble,
    threshold: f64,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if ensemble.n_checkpoints() == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let probs = ensemble.mean_probs();
    let mut out = Vec::new();
    for (i, row) in probs.outer_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max >= threshold && max < 1.0 {
            out.push((i, row.to_vec()));
        }
    }
    Ok(out)
}

fn validate_pseudo_rows(rows: &[(usize, Vec<f64>)], threshold: f64) -> Result<()> {
    for (i, row) in rows {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max >= threshold && max < 1.0) {
            return Err(Error::Protocol(format!(
                "pseudo-label row {i} violates the membership predicate (max {max})"
            )));
        }
    }
    Ok(())
}

/// Self-train each member on the pseudo-labeled subset with the
/// KL-divergence loss (plus the weighted source term), folding checkpoint
/// outputs into the ensemble every `ckpt_epochs` epochs. An empty subset
/// is skipped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn self_train_round(
    members: &mut [MlpModel],
    ensemble: &mut CheckpointEnsemble,
    r_sub: &[(usize, Vec<f64>)],
    target: &Dataset,
    source: &Dataset,
    train_cfg: &TrainConfig,
    self_train_epochs: usize,
    ckpt_epochs: usize,
    threshold: f64,
    seed: u64,
) -> Result<()> {
    if r_sub.is_empty() {
        log::warn!("pseudo-labeled subset is empty; skipping self-training");
        return Ok(());
    }
    validate_pseudo_rows(r_sub, threshold)?;
    let k = target.n_classes;
    let idx: Vec<usize> = r_sub.iter().map(|(i, _)| *i).collect();
    let x = gather_rows(&target.x.view(), &idx);
    let mut soft = Array2::zeros((r_sub.len(), k));
    for (r, (_, row)) in r_sub.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            soft[[r, c]] = v;
        }
    }
    let cfg = TrainConfig {
        min_epochs: self_train_epochs,
        max_epochs: self_train_epochs,
        patience: 0,
        ..train_cfg.clone()
    };
    for (j, member) in members.iter_mut().enumerate() {
        let set = LabeledSet::soft(x.view(), soft.view());
        let mut hook_err: Option<Error> = None;
        sgd_train(
            member,
            &set,
            LossKind::KlDivergence,
            Some(source),
            &cfg,
            derive_seed(seed, &[TAG_SELF, j as u64]),
            ckpt_epochs,
            |m| {
                if hook_err.is_none() {
                    if let Err(e) = record_checkpoint(m, target, ensemble) {
                        hook_err = Some(e);
                    }
                }
            },
        )?;
        if let Some(e) = hook_err {
            return Err(e);
        }
    }
    Ok(())
}

fn record_checkpoint(
    model: &MlpModel,
    target: &Dataset,
    ensemble: &mut CheckpointEnsemble,
) -> Result<()> {
    let probs = model.predict_probs(&target.x.view())?;
    ensemble.update(&probs)
}

/// ASPEST: checkpoint ensembling over initial fine-tuning, per-round
/// lowest-margin selection on the averaged matrix, joint fine-tuning with
/// epoch checkpoints, then self-training on high-confidence soft
/// pseudo-labels. The final classifier and score come from the averaged
/// checkpoint matrix.
#[allow(clippy::too_many_arguments)]
pub fn run_aspest(
    source_model: &MlpModel,
    source: &Dataset,
    target: &Dataset,
    cfg: &AspestConfig,
    budget: usize,
    train_cfg: &TrainConfig,
    metric_targets: &MetricTargets,
    seed: u64,
) -> Result<AspestRun> {
    cfg.validate()?;
    check_run_preconditions(target, budget, cfg.rounds)?;
    let train_cfg = TrainConfig {
        lambda: cfg.lambda,
        ..train_cfg.clone()
    };
    train_cfg.validate()?;

    let n = target.len();
    let k = target.n_classes;
    let mut state = SelectionState::new(n, budget, cfg.rounds)?;
    let mut oracle = LabelOracle::new(target.y.clone(), budget);
    let mut ensemble = CheckpointEnsemble::new(n, k);

    // Phase 0: initial source fine-tuning with step checkpoints.
    let mut members = {
        let ens = &mut ensemble;
        init_members(
            source_model,
            source,
            cfg.n_members,
            cfg.initial_steps,
            &train_cfg,
            seed,
            cfg.ckpt_steps,
            |m| record_checkpoint(m, target, ens),
        )?
    };
    if ensemble.n_checkpoints() == 0 {
        // initial_steps < ckpt_steps: record the end-of-phase members so
        // margin selection has a defined state
        for member in &members {
            record_checkpoint(member, target, &mut ensemble)?;
        }
    }

    let mut labeled_idx: Vec<usize> = Vec::new();
    let mut labeled_y: Vec<usize> = Vec::new();
    let mut round_logs = Vec::new();
    let m = state.per_round();

    if m > 0 {
        for t in 1..=cfg.rounds {
            // Selection: lowest margin of the checkpoint ensemble.
            let margins = ensemble.predict()?.margin;
            let batch = select_top_m(
                &margins,
                Direction::Lowest,
                &state,
                m,
                derive_seed(seed, &[TAG_SELECT, t as u64]),
            )?;
            let batch_labels = oracle.label(&batch)?;
            state.mark_selected(&batch)?;
            labeled_idx.extend_from_slice(&batch);
            labeled_y.extend_from_slice(&batch_labels);

            // Fine-tuning: reset the ensemble, record epoch checkpoints.
            ensemble.reset();
            let labeled_x = gather_rows(&target.x.view(), &labeled_idx);
            for (j, member) in members.iter_mut().enumerate() {
                let set = LabeledSet::hard(labeled_x.view(), &labeled_y);
                let mut hook_err: Option<Error> = None;
                {
                    let ens = &mut ensemble;
                    sgd_train(
                        member,
                        &set,
                        LossKind::CrossEntropy,
                        Some(source),
                        &train_cfg,
                        derive_seed(seed, &[TAG_FINE, t as u64, j as u64]),
                        cfg.ckpt_epochs,
                        |mdl| {
                            if hook_err.is_none() {
                                if let Err(e) = record_checkpoint(mdl, target, ens) {
                                    hook_err = Some(e);
                                }
                            }
                        },
                    )?;
                }
                if let Some(e) = hook_err {
                    return Err(e);
                }
            }
            if ensemble.n_checkpoints() == 0 {
                // fine-tuning stopped before the first checkpoint epoch
                for member in &members {
                    record_checkpoint(member, target, &mut ensemble)?;
                }
            }

            // Self-training on a subsample of the pseudo-labeled set.
            let pseudo = build_pseudo_label_set(&ensemble, cfg.pseudo_label_threshold)?;
            let cap = ((cfg.subsample_fraction * n as f64).floor() as usize).min(pseudo.len());
            let r_sub = subsample_pseudo(pseudo, cap, derive_seed(seed, &[TAG_SUBSAMPLE, t as u64]));
            self_train_round(
                &mut members,
                &mut ensemble,
                &r_sub,
                target,
                source,
                &train_cfg,
                cfg.self_train_epochs,
                cfg.ckpt_epochs,
                cfg.pseudo_label_threshold,
                derive_seed(seed, &[TAG_SELF, t as u64]),
            )?;

            // Round log: deep-ensemble accuracy of the members plus the
            // metric bundle of the checkpoint-ensemble classifier.
            let member_probs = member_mean_probs(&members, target)?;
            let member_pred = predict_from_probs(&member_probs);
            let (_, _, _, bundle) = evaluate_probs(
                ensemble.mean_probs(),
                target,
                state.selected_mask(),
                metric_targets,
            )?;
            round_logs.push(RoundLog {
                round: t,
                selected_indices: batch,
                ensemble_accuracy: unlabeled_accuracy(
                    &member_pred.labels,
                    target,
                    state.selected_mask(),
                ),
                metrics: bundle,
            });
        }
    }

    let (frame, predictions, scores, _) = evaluate_probs(
        ensemble.mean_probs(),
        target,
        state.selected_mask(),
        metric_targets,
    )?;
    Ok(AspestRun {
        ensemble,
        outcome: RunOutcome {
            frame,
            predictions,
            scores,
            rounds: round_logs,
            labels_used: oracle.used(),
        },
    })
}

/// Uniform subsample without replacement, reseeded per round.
fn subsample_pseudo(
    mut pseudo: Vec<(usize, Vec<f64>)>,
    cap: usize,
    seed: u64,
) -> Vec<(usize, Vec<f64>)> {
    if pseudo.len() > cap {
        let mut rng = crate::rng::stream_rng(seed, &[]);
        pseudo.shuffle(&mut rng);
        pseudo.truncate(cap);
        pseudo.sort_by_key(|(i, _)| *i);
    }
    pseudo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_shift, SplitRole, SynthShiftSpec};
    use crate::nn::Activation;
    use ndarray::array;

    fn tiny_shift_data(seed: u64) -> (Dataset, Dataset, Dataset) {
        let spec = SynthShiftSpec {
            n_classes: 3,
            n_features: 4,
            n_source: 150,
            n_target: 60,
            shift_magnitude: 2.0,
            val_fraction: 0.2,
        };
        let (train, val, test, _) = synth_gaussian_shift(&spec, seed).unwrap();
        (train, val, test)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 8,
            min_epochs: 4,
            patience: 2,
            lambda: 1.0,
            optimizer: Optimizer::Sgd,
        }
    }

    fn spec() -> ModelSpec {
        ModelSpec {
            hidden: vec![16],
            activation: Activation::Relu,
            dropout: 0.0,
            l2: 1e-5,
        }
    }

    #[test]
    fn oracle_enforces_protocol() {
        let mut oracle = LabelOracle::new(vec![0, 1, 2, 1], 3);
        assert_eq!(oracle.label(&[1, 2]).unwrap(), vec![1, 2]);
        assert!(oracle.label(&[1]).is_err(), "relabel");
        assert!(oracle.label(&[9]).is_err(), "out of range");
        assert_eq!(oracle.label(&[0]).unwrap(), vec![0]);
        assert!(oracle.label(&[3]).is_err(), "budget");
        assert_eq!(oracle.used(), 3);
    }

    #[test]
    fn source_train_learns_a_separable_task() {
        // three classes in well-separated boxes: linearly separable
        let mut rng = crate::rng::stream_rng(2, &[1]);
        use rand::Rng;
        let n = 120;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            let center = [(c as f64) * 10.0, (c as f64) * -6.0];
            x[[i, 0]] = center[0] + rng.random_range(-0.5..0.5);
            x[[i, 1]] = center[1] + rng.random_range(-0.5..0.5);
            y.push(c);
        }
        let data = Dataset::new(x, y, 3, SplitRole::SourceTrain).unwrap();
        let (train, val) = crate::data::split_train_val(&data, 0.75, 0).unwrap();
        let model = source_train(&spec(), &train, 200, 0.05, 16, Optimizer::Sgd, 7).unwrap();
        let probs = model.predict_probs(&val.x.view()).unwrap();
        let pred = predict_from_probs(&probs);
        let acc = pred
            .labels
            .iter()
            .zip(&val.y)
            .filter(|(p, y)| p == y)
            .count() as f64
            / val.len() as f64;
        assert!(acc > 0.95, "source-val accuracy {acc}");
    }

    #[test]
    fn sr_zero_budget_is_pure_selective_prediction() {
        let (train, _, test) = tiny_shift_data(5);
        let model = source_train(&spec(), &train, 30, 0.05, 16, Optimizer::Sgd, 7).unwrap();
        let run = run_sr(
            &model,
            &train,
            &test,
            AcquisitionKind::Margin,
            0,
            10,
            &quick_cfg(),
            1.0,
            &MetricTargets::default(),
            11,
        )
        .unwrap();
        assert!(run.outcome.rounds.is_empty());
        assert_eq!(run.outcome.labels_used, 0);
        let direct = model.predict_probs(&test.x.view()).unwrap();
        let direct_pred = predict_from_probs(&direct);
        assert_eq!(run.outcome.predictions, direct_pred.labels);
        assert_eq!(run.outcome.scores, direct_pred.confidence);
    }

    #[test]
    fn de_single_member_no_init_matches_sr_at_zero_budget() {
        let (train, _, test) = tiny_shift_data(6);
        let model = source_train(&spec(), &train, 20, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let sr = run_sr(
            &model, &train, &test, AcquisitionKind::Margin, 0, 1, &quick_cfg(), 1.0,
            &MetricTargets::default(), 9,
        )
        .unwrap();
        let de = run_de(
            &model, &train, &test, AcquisitionKind::Margin, 0, 1, 1, 0, &quick_cfg(), 1.0,
            &MetricTargets::default(), 9,
        )
        .unwrap();
        assert_eq!(sr.outcome.predictions, de.outcome.predictions);
        assert_eq!(sr.outcome.scores, de.outcome.scores);
    }

    #[test]
    fn de_members_diverge_under_distinct_streams() {
        let (train, _, test) = tiny_shift_data(7);
        let model = source_train(&spec(), &train, 20, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let de = run_de(
            &model, &train, &test, AcquisitionKind::Uniform, 0, 1, 3, 40, &quick_cfg(), 1.0,
            &MetricTargets::default(), 9,
        )
        .unwrap();
        let p0 = de.members[0].predict_probs(&test.x.view()).unwrap();
        let p1 = de.members[1].predict_probs(&test.x.view()).unwrap();
        assert_ne!(p0, p1, "independent fine-tuning must diverge");
    }

    #[test]
    fn budget_smaller_than_rounds_is_rejected() {
        let (train, _, test) = tiny_shift_data(8);
        let model = source_train(&spec(), &train, 5, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let err = run_sr(
            &model, &train, &test, AcquisitionKind::Margin, 5, 10, &quick_cfg(), 1.0,
            &MetricTargets::default(), 9,
        );
        assert!(err.is_err());
        let err = run_aspest(
            &model,
            &train,
            &test,
            &AspestConfig { rounds: 10, ..Default::default() },
            5,
            &quick_cfg(),
            &MetricTargets::default(),
            9,
        );
        assert!(err.is_err());
    }

    #[test]
    fn pseudo_label_set_membership() {
        let mut ens = CheckpointEnsemble::new(3, 2);
        ens.update(&array![[0.95, 0.05], [1.0, 0.0], [0.89, 0.11]]).unwrap();
        let set = build_pseudo_label_set(&ens, 0.9).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].0, 0);
        assert_eq!(set[0].1, vec![0.95, 0.05]);
        let empty = CheckpointEnsemble::new(3, 2);
        assert!(build_pseudo_label_set(&empty, 0.9).is_err());
    }

    #[test]
    fn budget_and_disjointness_hold_over_a_full_run() {
        let (train, _, test) = tiny_shift_data(9);
        let model = source_train(&spec(), &train, 30, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let run = run_sr(
            &model, &train, &test, AcquisitionKind::Margin, 12, 4, &quick_cfg(), 1.0,
            &MetricTargets::default(), 13,
        )
        .unwrap();
        assert_eq!(run.outcome.labels_used, 12);
        let mut all: Vec<usize> = run
            .outcome
            .rounds
            .iter()
            .flat_map(|r| r.selected_indices.iter().copied())
            .collect();
        assert_eq!(all.len(), 12);
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total, "batches must be pairwise disjoint");
        // frame's selected mask matches the labeled set
        let selected: Vec<usize> = run
            .outcome
            .frame
            .selected()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(selected, all);
    }

    #[test]
    fn aspest_smoke_run_improves_over_rounds_and_respects_budget() {
        let (train, _, test) = tiny_shift_data(10);
        let model = source_train(&spec(), &train, 40, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let cfg = AspestConfig {
            n_members: 2,
            rounds: 3,
            initial_steps: 30,
            ckpt_steps: 10,
            ckpt_epochs: 2,
            self_train_epochs: 4,
            ..Default::default()
        };
        let run = run_aspest(
            &model,
            &train,
            &test,
            &cfg,
            15,
            &quick_cfg(),
            &MetricTargets::default(),
            17,
        )
        .unwrap();
        assert_eq!(run.outcome.labels_used, 15);
        assert_eq!(run.outcome.rounds.len(), 3);
        assert!(run.ensemble.n_checkpoints() > 0);
        // final scores come from the checkpoint ensemble matrix
        let pred = run.ensemble.predict().unwrap();
        assert_eq!(run.outcome.scores, pred.confidence);
    }

    #[test]
    fn aspest_high_threshold_skips_self_training_but_completes() {
        let (train, _, test) = tiny_shift_data(11);
        let model = source_train(&spec(), &train, 20, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let cfg = AspestConfig {
            n_members: 2,
            rounds: 2,
            initial_steps: 10,
            ckpt_steps: 5,
            ckpt_epochs: 2,
            self_train_epochs: 3,
            pseudo_label_threshold: 1.0 - 1e-9,
            ..Default::default()
        };
        let run = run_aspest(
            &model,
            &train,
            &test,
            &cfg,
            10,
            &quick_cfg(),
            &MetricTargets::default(),
            23,
        );
        assert!(run.is_ok(), "run must complete: {:?}", run.err());
    }

    #[test]
    fn runs_are_bit_deterministic_per_seed() {
        let (train, _, test) = tiny_shift_data(12);
        let model = source_train(&spec(), &train, 20, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let cfg = AspestConfig {
            n_members: 2,
            rounds: 2,
            initial_steps: 20,
            ckpt_steps: 10,
            ckpt_epochs: 2,
            self_train_epochs: 3,
            ..Default::default()
        };
        let a = run_aspest(&model, &train, &test, &cfg, 10, &quick_cfg(), &MetricTargets::default(), 5)
            .unwrap();
        let b = run_aspest(&model, &train, &test, &cfg, 10, &quick_cfg(), &MetricTargets::default(), 5)
            .unwrap();
        assert_eq!(a.outcome.scores, b.outcome.scores);
        assert_eq!(a.outcome.predictions, b.outcome.predictions);
        let rounds_a: Vec<&Vec<usize>> = a.outcome.rounds.iter().map(|r| &r.selected_indices).collect();
        let rounds_b: Vec<&Vec<usize>> = b.outcome.rounds.iter().map(|r| &r.selected_indices).collect();
        assert_eq!(rounds_a, rounds_b);
    }

    #[test]
    fn all_acquisitions_produce_valid_batches() {
        let (train, _, test) = tiny_shift_data(13);
        let model = source_train(&spec(), &train, 20, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        for kind in [
            AcquisitionKind::Uniform,
            AcquisitionKind::Confidence,
            AcquisitionKind::Entropy,
            AcquisitionKind::Margin,
            AcquisitionKind::AvgKld,
            AcquisitionKind::Kcg,
            AcquisitionKind::Clue,
            AcquisitionKind::Badge,
        ] {
            let run = run_sr(
                &model, &train, &test, kind, 6, 2, &quick_cfg(), 1.0,
                &MetricTargets::default(), 31,
            )
            .unwrap();
            assert_eq!(run.outcome.labels_used, 6, "{kind:?}");
        }
    }

    #[test]
    fn self_training_on_own_outputs_is_a_no_op_without_regularization() {
        let (train, _, test) = tiny_shift_data(16);
        let plain_spec = ModelSpec {
            hidden: vec![8],
            activation: Activation::Relu,
            dropout: 0.0,
            l2: 0.0,
        };
        let model = source_train(&plain_spec, &train, 10, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let probs = model.predict_probs(&test.x.view()).unwrap();
        let r_sub: Vec<(usize, Vec<f64>)> = (0..5).map(|i| (i, probs.row(i).to_vec())).collect();
        let mut members = vec![model];
        let mut ens = CheckpointEnsemble::new(test.len(), test.n_classes);
        let mut cfg = quick_cfg();
        cfg.lambda = 0.0;
        let before = members[0].weights()[0].clone();
        // threshold 0: every row is a member regardless of confidence
        self_train_round(
            &mut members, &mut ens, &r_sub, &test, &train, &cfg, 3, 0, 1e-9, 0,
        )
        .unwrap();
        let after = &members[0].weights()[0];
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a, b, "zero KL gradient must leave parameters untouched");
        }
    }

    #[test]
    fn self_train_checkpoints_fold_into_the_ensemble() {
        let (train, _, test) = tiny_shift_data(17);
        let model = source_train(&spec(), &train, 10, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let probs = model.predict_probs(&test.x.view()).unwrap();
        let r_sub: Vec<(usize, Vec<f64>)> = (0..6).map(|i| (i, probs.row(i).to_vec())).collect();
        let mut members = vec![model.clone(), model];
        let mut ens = CheckpointEnsemble::new(test.len(), test.n_classes);
        // epochs=4, interval=2: two checkpoints per member
        self_train_round(
            &mut members, &mut ens, &r_sub, &test, &train, &quick_cfg(), 4, 2, 1e-9, 0,
        )
        .unwrap();
        assert_eq!(ens.n_checkpoints(), 4);
    }

    #[test]
    fn aspest_round_checkpoint_count_matches_the_protocol() {
        // fine-tune >= 10 epochs at interval 5 gives >= 2 checkpoints, and
        // 20 self-training epochs at interval 5 give exactly 4, per member
        let (train, _, test) = tiny_shift_data(18);
        let model = source_train(&spec(), &train, 20, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let n_members = 2;
        let cfg = AspestConfig {
            n_members,
            rounds: 1,
            initial_steps: 10,
            ckpt_steps: 5,
            ckpt_epochs: 5,
            self_train_epochs: 20,
            // low threshold so the pseudo-labeled set cannot come up empty
            // (row maxima are at least 1/K)
            pseudo_label_threshold: 0.3,
            ..Default::default()
        };
        let mut train_cfg = quick_cfg();
        train_cfg.min_epochs = 10;
        train_cfg.max_epochs = 12;
        let run = run_aspest(
            &model,
            &train,
            &test,
            &cfg,
            10,
            &train_cfg,
            &MetricTargets::default(),
            19,
        )
        .unwrap();
        let per_member_min = 10 / 5 + 20 / 5; // fine-tune floor + self-train
        assert!(
            run.ensemble.n_checkpoints() >= n_members * per_member_min,
            "expected >= {} checkpoints, got {}",
            n_members * per_member_min,
            run.ensemble.n_checkpoints()
        );
    }

    #[test]
    fn single_round_takes_the_whole_budget_in_one_batch() {
        let (train, _, test) = tiny_shift_data(19);
        let model = source_train(&spec(), &train, 10, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let run = run_sr(
            &model, &train, &test, AcquisitionKind::Margin, 8, 1, &quick_cfg(), 1.0,
            &MetricTargets::default(), 2,
        )
        .unwrap();
        assert_eq!(run.outcome.rounds.len(), 1);
        assert_eq!(run.outcome.rounds[0].selected_indices.len(), 8);
    }

    #[test]
    fn self_train_round_skips_empty_subset() {
        let (train, _, test) = tiny_shift_data(14);
        let model = source_train(&spec(), &train, 10, 0.05, 16, Optimizer::Sgd, 3).unwrap();
        let mut members = vec![model];
        let mut ens = CheckpointEnsemble::new(test.len(), test.n_classes);
        record_checkpoint(&members[0], &test, &mut ens).unwrap();
        let before = members[0].weights()[0].clone();
        self_train_round(
            &mut members,
            &mut ens,
            &[],
            &test,
            &train,
            &quick_cfg(),
            3,
            1,
            0.9,
            0,
        )
        .unwrap();
        assert_eq!(members[0].weights()[0], before);
    }

    #[test]
    fn subsample_caps_and_is_seeded() {
        let pseudo: Vec<(usize, Vec<f64>)> = (0..20).map(|i| (i, vec![0.95, 0.05])).collect();
        let a = subsample_pseudo(pseudo.clone(), 5, 3);
        let b = subsample_pseudo(pseudo.clone(), 5, 3);
        assert_eq!(
            a.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            b.iter().map(|(i, _)| *i).collect::<Vec<_>>()
        );
        assert_eq!(a.len(), 5);
        let all = subsample_pseudo(pseudo, 50, 3);
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn dataset_roles_are_preserved_through_runs() {
        let (train, val, test) = tiny_shift_data(15);
        assert_eq!(train.role, SplitRole::SourceTrain);
        assert_eq!(val.role, SplitRole::SourceVal);
        assert_eq!(test.role, SplitRole::TargetTest);
    }
}
