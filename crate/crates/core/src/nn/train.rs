//! Training loops: the joint target+source objective with early stopping
//! and checkpoint hooks, plus plain source-only training by epoch or step
//! count.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Gradients, LossKind, MlpModel, Targets};

/// Parameter-update rule. Plain SGD is the default; Adam is available for
/// protocols tuned around it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}



impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct OptState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    t: u64,
}

impl OptState {
    fn new(model: &MlpModel) -> Self {
        Self {
            m_w: model.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_w: model.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_b: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
            v_b: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients, lr: f64, opt: Optimizer) {
        match opt {
            Optimizer::Sgd => {
                for (w, dw) in model.weights_mut().iter_mut().zip(&grads.d_weights) {
                    w.scaled_add(-lr, dw);
                }
                for (b, db) in model.biases_mut().iter_mut().zip(&grads.d_biases) {
                    b.scaled_add(-lr, db);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for l in 0..grads.d_weights.len() {
                    adam_update(
                        model.weights_mut()[l].as_slice_mut().unwrap(),
                        grads.d_weights[l].as_slice().unwrap(),
                        self.m_w[l].as_slice_mut().unwrap(),
                        self.v_w[l].as_slice_mut().unwrap(),
                        lr, beta1, beta2, eps, bc1, bc2,
                    );
                    adam_update(
                        model.biases_mut()[l].as_slice_mut().unwrap(),
                        grads.d_biases[l].as_slice().unwrap(),
                        self.m_b[l].as_slice_mut().unwrap(),
                        self.v_b[l].as_slice_mut().unwrap(),
                        lr, beta1, beta2, eps, bc1, bc2,
                    );
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
}

/// Hyper-parameters of one fine-tuning session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    /// Epochs without improvement of the monitor (training loss on the
    /// labeled target set) tolerated before stopping.
    pub patience: usize,
    /// Weight of the source cross-entropy term in the joint objective.
    pub lambda: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.min_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "min_epochs ({}) > max_epochs ({})",
                self.min_epochs, self.max_epochs
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Outcome of a training session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_monitor: f64,
    pub best_monitor: f64,
}

/// Labeled target points with hard or soft targets.
pub struct LabeledSet<'a> {
    pub x: ArrayView2<'a, f64>,
    pub targets: Targets<'a>,
}

impl<'a> LabeledSet<'a> {
    pub fn hard(x: ArrayView2<'a, f64>, y: &'a [usize]) -> Self {
        Self {
            x,
            targets: Targets::Hard(y),
        }
    }

    pub fn soft(x: ArrayView2<'a, f64>, y: ArrayView2<'a, f64>) -> Self {
        Self {
            x,
            targets: Targets::Soft(y),
        }
    }
}

/// Draws shuffled minibatches endlessly, reshuffling after each pass.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next_batch(&mut self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(len);
        for _ in 0..len.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

pub(crate) fn gather_rows(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

fn gather_targets(targets: &Targets<'_>, idx: &[usize]) -> (Option<Vec<usize>>, Option<Array2<f64>>) {
    match targets {
        Targets::Hard(y) => (Some(idx.iter().map(|&i| y[i]).collect()), None),
        Targets::Soft(y) => {
            let mut out = Array2::zeros((idx.len(), y.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&y.row(i));
            }
            (None, Some(out))
        }
    }
}

/// One optimizer step on `target_batch + lambda * source_batch` plus L2.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    model: &mut MlpModel,
    target_x: &Array2<f64>,
    target_targets: &Targets<'_>,
    target_loss: LossKind,
    source_batch: Option<(&Array2<f64>, &[usize])>,
    lambda: f64,
    lr: f64,
    optimizer: Optimizer,
    opt_state: &mut OptState,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let cache = model.forward_cached(&target_x.view(), Some(rng))?;
    let (_, mut grads) =
        model.loss_and_grads_from_cache(&target_x.view(), &cache, target_targets, target_loss)?;

    if let Some((sx, sy)) = source_batch {
        if lambda > 0.0 {
            let s_cache = model.forward_cached(&sx.view(), Some(rng))?;
            let (_, s_grads) = model.loss_and_grads_from_cache(
                &sx.view(),
                &s_cache,
                &Targets::Hard(sy),
                LossKind::CrossEntropy,
            )?;
            // Both gradient sets include the L2 term; subtract one copy so
            // the penalty enters the joint objective exactly once.
            grads.scaled_add(&s_grads, lambda);
            if model.l2_coeff() > 0.0 {
                for (dw, w) in grads.d_weights.iter_mut().zip(model.weights()) {
                    dw.scaled_add(-2.0 * model.l2_coeff() * lambda, w);
                }
            }
        }
    }

    opt_state.step(model, &grads, lr, optimizer);
    Ok(())
}

/// Fine-tune `model` on a labeled target set jointly with the source set.
///
/// Each step draws one minibatch from the target set (shuffled passes; an
/// epoch is one pass over the target set) and, when `cfg.lambda > 0` and a
/// source set is given, one freshly resampled source minibatch; the step
/// minimizes `target_loss + lambda * source_CE + L2`.
///
/// Runs at least `min_epochs` and at most `max_epochs` epochs, stopping
/// early once the target training loss has not improved for `patience`
/// epochs. `checkpoint_hook` fires after every `checkpoint_every`-th
/// completed epoch (0 disables it).
///
/// All randomness (batch order, source sampling, dropout masks) comes from
/// `seed`, so identical calls produce identical parameters.
#[allow(clippy::too_many_arguments)]
pub fn sgd_train(
    model: &mut MlpModel,
    target: &LabeledSet<'_>,
    target_loss: LossKind,
    source: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_every: usize,
    mut checkpoint_hook: impl FnMut(&MlpModel),
) -> Result<TrainReport> {
    cfg.validate()?;
    let n_target = target.x.nrows();
    if n_target == 0 {
        return Err(Error::Config("labeled target set is empty".into()));
    }
    if target.targets.len() != n_target {
        return Err(Error::Shape("target rows and labels disagree".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt_state = OptState::new(model);
    let mut source_stream = source.map(|s| BatchStream::new(s.len(), &mut rng));

    let mut best = f64::INFINITY;
    let mut since_improve = 0usize;
    let mut epochs_run = 0usize;
    let mut monitor = f64::INFINITY;
    // The monitor pass costs a full forward over the target set; when
    // early stopping cannot trigger (fixed epoch count) it only needs to
    // run on the last epoch, for the report.
    let early_stopping_active = cfg.min_epochs < cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n_target).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.min(n_target)) {
            let bx = gather_rows(&target.x, chunk);
            let (hard, soft) = gather_targets(&target.targets, chunk);
            let batch_targets = match (&hard, &soft) {
                (Some(h), _) => Targets::Hard(h),
                (_, Some(s)) => Targets::Soft(s.view()),
                _ => unreachable!(),
            };
            let source_batch = match (source, source_stream.as_mut()) {
                (Some(src), Some(stream)) if cfg.lambda > 0.0 => {
                    let idx = stream.next_batch(cfg.batch_size, &mut rng);
                    Some((gather_rows(&src.x.view(), &idx), idx.iter().map(|&i| src.y[i]).collect::<Vec<_>>()))
                }
                _ => None,
            };
            joint_step(
                model,
                &bx,
                &batch_targets,
                target_loss,
                source_batch.as_ref().map(|(x, y)| (x, y.as_slice())),
                cfg.lambda,
                cfg.learning_rate,
                cfg.optimizer,
                &mut opt_state,
                &mut rng,
            )?;
        }

        if early_stopping_active || epoch == cfg.max_epochs {
            monitor = model.data_loss(&target.x, &target.targets, target_loss)?;
            if !monitor.is_finite() {
                return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
            }
            if monitor < best {
                best = monitor;
                since_improve = 0;
            } else {
                since_improve += 1;
            }
        }
        epochs_run = epoch;
        if checkpoint_every > 0 && epoch % checkpoint_every == 0 {
            checkpoint_hook(model);
        }
        if early_stopping_active && epoch >= cfg.min_epochs && since_improve >= cfg.patience {
            break;
        }
    }

    Ok(TrainReport {
        epochs_run,
        final_monitor: monitor,
        best_monitor: best,
    })
}

/// Supervised source training for a fixed number of epochs (cross-entropy,
/// no early stopping). Zero epochs returns the model unchanged.
pub fn train_source_epochs(
    model: &mut MlpModel,
    source: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    optimizer: Optimizer,
    seed: u64,
) -> Result<TrainReport> {
    if source.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    if epochs == 0 {
        return Ok(TrainReport {
            epochs_run: 0,
            final_monitor: f64::NAN,
            best_monitor: f64::NAN,
        });
    }
    let cfg = TrainConfig {
        learning_rate,
        batch_size,
        max_epochs: epochs,
        min_epochs: epochs,
        patience: 0,
        lambda: 0.0,
        optimizer,
    };
    let set = LabeledSet {
        x: source.x.view(),
        targets: Targets::Hard(&source.y),
    };
    sgd_train(model, &set, LossKind::CrossEntropy, None, &cfg, seed, 0, |_| {})
}

/// Supervised source training for a fixed number of optimizer steps,
/// invoking `checkpoint_hook` every `checkpoint_every` steps (0 disables).
/// Batches come from shuffled passes over the source set.
#[allow(clippy::too_many_arguments)]
pub fn train_source_steps(
    model: &mut MlpModel,
    source: &Dataset,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    optimizer: Optimizer,
    seed: u64,
    checkpoint_every: usize,
    mut checkpoint_hook: impl FnMut(&MlpModel),
) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    if batch_size == 0 || learning_rate.is_nan() || learning_rate <= 0.0 {
        return Err(Error::Config("invalid step-training parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt_state = OptState::new(model);
    let mut stream = BatchStream::new(source.len(), &mut rng);
    for step in 1..=steps {
        let idx = stream.next_batch(batch_size, &mut rng);
        let bx = gather_rows(&source.x.view(), &idx);
        let by: Vec<usize> = idx.iter().map(|&i| source.y[i]).collect();
        joint_step(
            model,
            &bx,
            &Targets::Hard(&by),
            LossKind::CrossEntropy,
            None,
            0.0,
            learning_rate,
            optimizer,
            &mut opt_state,
            &mut rng,
        )?;
        if checkpoint_every > 0 && step % checkpoint_every == 0 {
            checkpoint_hook(model);
        }
    }
    Ok(())
}
