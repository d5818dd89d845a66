//! From-scratch multi-layer perceptron classifier.
//!
//! Dense layers with a shared hidden activation, inverted dropout on hidden
//! layers, a softmax head, and analytic backprop for two target losses:
//! cross-entropy (hard or soft targets) and KL divergence against soft
//! targets. Everything is `f64`; gradients are exact for the sampled
//! dropout mask, and gradient checks against central finite differences are
//! part of the test suite.

mod io;
mod train;

pub use train::{
    sgd_train, train_source_epochs, train_source_steps, LabeledSet, Optimizer, TrainConfig,
    TrainReport,
};
pub(crate) use train::gather_rows;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside logarithms; the KL data term divides by model
/// outputs, which can underflow for confident rows.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the (pre-dropout) activation output.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Loss applied to the labeled-target term of a training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    KlDivergence,
}

/// Classification targets: hard class indices or soft probability rows.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(ArrayView2<'a, f64>),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(y) => y.len(),
            Targets::Soft(y) => y.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter-shaped gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            d_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            d_biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    fn scaled_add(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            a.scaled_add(scale, b);
        }
    }
}

/// Softmax probabilities plus the penultimate-layer embedding.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: Array2<f64>,
    pub embedding: Array2<f64>,
}

pub(crate) struct ForwardCache {
    /// Post-activation values per hidden layer, before dropout.
    hidden_pre: Vec<Array2<f64>>,
    /// Hidden values actually fed forward (after dropout when active).
    hidden_post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    pub probs: Array2<f64>,
}

/// Architecture description; input and output widths come from the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub l2: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, n_classes: usize, seed: u64) -> Result<MlpModel> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(n_classes);
        MlpModel::new(&sizes, self.activation, self.dropout, self.l2, seed)
    }
}

/// A feed-forward softmax classifier with dropout and L2 regularization.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>, // (out, in) per layer
    biases: Vec<Array1<f64>>,
    activation: Activation,
    dropout_rate: f64,
    l2_coeff: f64,
    seed: u64,
    /// Stream used by [`MlpModel::forward_train`] for dropout masks.
    rng: ChaCha8Rng,
}

impl MlpModel {
    /// Initialize with fan-in-scaled uniform weights and zero biases,
    /// deterministically from `seed`.
    pub fn new(
        layer_sizes: &[usize],
        activation: Activation,
        dropout_rate: f64,
        l2_coeff: f64,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "layer_sizes needs input and output widths, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {layer_sizes:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {dropout_rate}"
            )));
        }
        if !(l2_coeff >= 0.0 && l2_coeff.is_finite()) {
            return Err(Error::Config(format!("l2_coeff must be >= 0, got {l2_coeff}")));
        }

        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                init_rng.random_range(-bound..bound)
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            dropout_rate,
            l2_coeff,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x44524f50),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Width of the penultimate embedding (input width when there is no
    /// hidden layer).
    pub fn embedding_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn l2_coeff(&self) -> f64 {
        self.l2_coeff
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    /// Reseed the dropout stream (used to give ensemble members
    /// independent randomness).
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(
        &self,
        x: &ArrayView2<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n_layers = self.weights.len();
        let mut hidden_pre = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut hidden_post = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));

        let mut current = x.to_owned();
        for l in 0..n_layers {
            let mut z = current.dot(&self.weights[l].t());
            z += &self.biases[l];
            if l + 1 < n_layers {
                z.mapv_inplace(|v| self.activation.apply(v));
                hidden_pre.push(z.clone());
                let mask = match dropout_rng.as_deref_mut() {
                    Some(rng) if self.dropout_rate > 0.0 => {
                        let keep = 1.0 - self.dropout_rate;
                        let m = Array2::from_shape_fn(z.dim(), |_| {
                            if rng.random_range(0.0..1.0) < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        z *= &m;
                        Some(m)
                    }
                    _ => None,
                };
                masks.push(mask);
                hidden_post.push(z.clone());
                current = z;
            } else {
                softmax_rows_inplace(&mut z);
                return Ok(ForwardCache {
                    hidden_pre,
                    hidden_post,
                    masks,
                    probs: z,
                });
            }
        }
        unreachable!("constructor guarantees at least one layer");
    }

    fn embedding_from_cache(&self, x: &ArrayView2<f64>, cache: &ForwardCache) -> Array2<f64> {
        match cache.hidden_post.last() {
            Some(h) => h.clone(),
            None => x.to_owned(),
        }
    }

    /// Inference forward pass (dropout off). Returns softmax probabilities
    /// and the penultimate embedding.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<ForwardOutput> {
        let cache = self.forward_cached(x, None)?;
        let embedding = self.embedding_from_cache(x, &cache);
        Ok(ForwardOutput {
            probs: cache.probs,
            embedding,
        })
    }

    /// Training-mode forward pass: dropout masks drawn from the model's own
    /// stream. The training loop uses its own seeded stream instead so that
    /// runs reproduce bit-exactly.
    pub fn forward_train(&mut self, x: &ArrayView2<f64>) -> Result<ForwardOutput> {
        let mut rng = self.rng.clone();
        let cache = self.forward_cached(x, Some(&mut rng))?;
        self.rng = rng;
        let embedding = self.embedding_from_cache(x, &cache);
        Ok(ForwardOutput {
            probs: cache.probs,
            embedding,
        })
    }

    /// Softmax probabilities only (dropout off).
    pub fn predict_probs(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, None)?.probs)
    }

    /// Mean data loss on `(x, targets)` plus the L2 penalty, with analytic
    /// parameter gradients. Dropout is off: the result is a pure function
    /// of the parameters, suitable for finite-difference verification.
    pub fn loss_and_grads(
        &self,
        x: &ArrayView2<f64>,
        targets: &Targets<'_>,
        kind: LossKind,
    ) -> Result<(f64, Gradients)> {
        let cache = self.forward_cached(x, None)?;
        self.loss_and_grads_from_cache(x, &cache, targets, kind)
    }

    pub(crate) fn loss_and_grads_from_cache(
        &self,
        x: &ArrayView2<f64>,
        cache: &ForwardCache,
        targets: &Targets<'_>,
        kind: LossKind,
    ) -> Result<(f64, Gradients)> {
        validate_inputs(x, targets, self.output_dim(), kind)?;
        let n = x.nrows();
        let data_loss = data_loss_of_probs(&cache.probs, targets, kind)?;

        // d(mean data loss)/d(logits) = (p - y) / n for both losses.
        let mut dlogits = cache.probs.clone();
        match targets {
            Targets::Hard(y) => {
                for (i, &yi) in y.iter().enumerate() {
                    dlogits[[i, yi]] -= 1.0;
                }
            }
            Targets::Soft(y) => {
                dlogits -= y;
            }
        }
        dlogits /= n as f64;

        let mut grads = self.backward(x, cache, dlogits);
        let mut penalty = 0.0;
        for (dw, w) in grads.d_weights.iter_mut().zip(&self.weights) {
            penalty += w.iter().map(|v| v * v).sum::<f64>();
            dw.scaled_add(2.0 * self.l2_coeff, w);
        }
        Ok((data_loss + self.l2_coeff * penalty, grads))
    }

    /// Backprop the logit gradient through the network. L2 is added by the
    /// caller.
    fn backward(&self, x: &ArrayView2<f64>, cache: &ForwardCache, dlogits: Array2<f64>) -> Gradients {
        let n_layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dlogits;
        for l in (0..n_layers).rev() {
            {
                let input_l: ArrayView2<f64> = if l == 0 {
                    x.view()
                } else {
                    cache.hidden_post[l - 1].view()
                };
                grads.d_weights[l] = delta.t().dot(&input_l);
                grads.d_biases[l] = delta.sum_axis(Axis(0));
            }
            if l > 0 {
                let mut da = delta.dot(&self.weights[l]);
                if let Some(mask) = &cache.masks[l - 1] {
                    da *= mask;
                }
                let pre = &cache.hidden_pre[l - 1];
                da.zip_mut_with(pre, |g, &a| *g *= self.activation.grad_from_output(a));
                delta = da;
            }
        }
        grads
    }

    /// Mean data loss (no L2, dropout off); the early-stopping monitor.
    pub fn data_loss(&self, x: &ArrayView2<f64>, targets: &Targets<'_>, kind: LossKind) -> Result<f64> {
        validate_inputs(x, targets, self.output_dim(), kind)?;
        let probs = self.predict_probs(x)?;
        data_loss_of_probs(&probs, targets, kind)
    }

    /// Per-example gradient embedding: the outer product of the softmax
    /// residual against the predicted class with the penultimate embedding,
    /// flattened class-major to `n x (h*K)`.
    pub fn gradient_embedding(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.forward(x)?;
        let (n, k) = out.probs.dim();
        let h = out.embedding.ncols();
        let mut g = Array2::zeros((n, h * k));
        for i in 0..n {
            let row = out.probs.row(i);
            let pred = argmax_row(&row.to_vec());
            for c in 0..k {
                let resid = row[c] - if c == pred { 1.0 } else { 0.0 };
                for j in 0..h {
                    g[[i, c * h + j]] = resid * out.embedding[[i, j]];
                }
            }
        }
        Ok(g)
    }

    /// Sum of squared weights (biases excluded); the L2 penalty is
    /// `l2_coeff` times this.
    pub fn weight_squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows_inplace(z: &mut Array2<f64>) {
    for mut row in z.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn validate_inputs(
    x: &ArrayView2<f64>,
    targets: &Targets<'_>,
    n_classes: usize,
    kind: LossKind,
) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in input features".into()));
    }
    if targets.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} target rows for {} inputs",
            targets.len(),
            x.nrows()
        )));
    }
    match targets {
        Targets::Hard(y) => {
            if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
                return Err(Error::Shape(format!("hard label {bad} >= {n_classes} classes")));
            }
        }
        Targets::Soft(y) => {
            if y.ncols() != n_classes {
                return Err(Error::Shape(format!(
                    "soft targets have {} columns, model outputs {}",
                    y.ncols(),
                    n_classes
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite value in soft targets".into()));
            }
            if kind == LossKind::KlDivergence {
                for (i, row) in y.outer_iter().enumerate() {
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::Numeric(format!(
                            "soft target row {i} sums to {sum}, expected 1"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Mean per-row data loss. Conventions: `0 * log 0 = 0`, and model outputs
/// are floored at [`LOG_FLOOR`] inside logarithms.
fn data_loss_of_probs(probs: &Array2<f64>, targets: &Targets<'_>, kind: LossKind) -> Result<f64> {
    let n = probs.nrows();
    let mut total = 0.0;
    match targets {
        Targets::Hard(y) => {
            for (i, &yi) in y.iter().enumerate() {
                let p = probs[[i, yi]].max(LOG_FLOOR);
                // For one-hot targets CE and KL coincide (target entropy 0).
                total += -p.ln();
            }
        }
        Targets::Soft(y) => {
            for (row_p, row_y) in probs.outer_iter().zip(y.outer_iter()) {
                for (&p, &t) in row_p.iter().zip(row_y.iter()) {
                    if t > 0.0 {
                        let p = p.max(LOG_FLOOR);
                        total += match kind {
                            LossKind::CrossEntropy => -t * p.ln(),
                            LossKind::KlDivergence => t * (t.ln() - p.ln()),
                        };
                    }
                }
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is non-finite".into()));
    }
    Ok(loss)
}
