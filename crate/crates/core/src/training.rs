//! Adam optimization with early stopping, MSE regression pre-training and
//! finite-difference gradient checks.
//!
//! Batch gradients are computed in parallel over fixed-size chunks of the
//! batch and summed in chunk order, so results do not depend on the number
//! of worker threads.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassLabel, LabeledExample, ScoredExample, TaskLabelA};
use crate::encoder::{Encoder, ModelError};
use crate::evaluation::{macro_f1, report_from_predictions, EvalError};
use crate::mtl::{baseline_terms, mtl_terms, Gold, LossTerm, LossWeights, ModelKind, MtlModel};
use crate::params::{cross_entropy, join, sigmoid, Linear, NamedTensor, Params};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Examples per parallel work unit when accumulating batch gradients.
const CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} corpus is empty")]
    Empty(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            loss_weights: LossWeights::paper(),
            seed: 0,
            kind: ModelKind::Mtl,
        }
    }
}

impl TrainConfig {
    /// Full-scale fine-tuning hyperparameters.
    pub fn paper() -> Self {
        Self { learning_rate: 3e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

/// A tokenized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub seq: TokenSequence,
    pub gold: Gold,
}

/// A tokenized example with a regression target in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedScored {
    pub seq: TokenSequence,
    pub target: f64,
}

pub fn encode_labeled(examples: &[LabeledExample], vocab: &Vocabulary, max_len: usize) -> Vec<EncodedExample> {
    examples.iter().map(|ex| EncodedExample { seq: vocab.encode(&ex.tweet.text, max_len), gold: Gold::from(ex) }).collect()
}

pub fn encode_scored(examples: &[ScoredExample], vocab: &Vocabulary, max_len: usize) -> Vec<EncodedScored> {
    examples.iter().map(|ex| EncodedScored { seq: vocab.encode(&ex.tweet.text, max_len), target: ex.avg_conf }).collect()
}

/// Adam with bias-corrected moment estimates over a flat parameter view.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grad: &P) {
        let g = grad.flatten();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut slots = Vec::new();
        params.collect_mut(&mut slots);
        let values = slots.into_iter().flat_map(|s| s.iter_mut());
        for (((p, &gi), m), v) in values.zip(&g).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
            *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Stream-independent seed for the dropout mask of one example.
fn mix(seed: u64, parts: [u64; 3]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        h = (h ^ p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_add(0x94D0_49BB_1331_11EB);
    }
    h
}

/// Sums per-example gradients and losses over `items`, in parallel chunks
/// reduced in order.
fn chunked_gradient<P, T, F>(params: &P, items: &[T], f: F) -> (P, f64)
where
    P: Params + Send + Sync,
    T: Sync,
    F: Fn(usize, &T, &mut P) -> f64 + Sync,
{
    let partials: Vec<(P, f64)> = items
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grad = params.zeros_like();
            let loss = chunk.iter().enumerate().map(|(j, item)| f(c * CHUNK + j, item, &mut grad)).sum();
            (grad, loss)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut grad, mut loss) = iter.next().unwrap_or_else(|| (params.zeros_like(), 0.0));
    for (g, l) in iter {
        grad.add_assign(&g);
        loss += l;
    }
    (grad, loss)
}

fn batch_terms(batch: &[&EncodedExample], kind: ModelKind, weights: LossWeights) -> Vec<Vec<LossTerm>> {
    let golds: Vec<Gold> = batch.iter().map(|ex| ex.gold).collect();
    match kind {
        ModelKind::Mtl => mtl_terms(&golds, weights),
        ModelKind::Baseline => baseline_terms(&golds),
    }
}

/// Gradient and value of the batch objective. With `dropout_seed` set,
/// every example draws its dropout mask from its own derived stream;
/// `None` runs in evaluation mode.
pub fn batch_gradient(
    model: &MtlModel,
    batch: &[&EncodedExample],
    kind: ModelKind,
    weights: LossWeights,
    dropout_seed: Option<u64>,
) -> (MtlModel, f64) {
    let terms = batch_terms(batch, kind, weights);
    let work: Vec<(&EncodedExample, &Vec<LossTerm>)> = batch.iter().copied().zip(&terms).collect();
    chunked_gradient(model, &work, |i, (ex, terms), grad| {
        let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(mix(s, [i as u64, 0, 0])));
        let ces = model.accumulate_gradients(&ex.seq, terms, rng.as_mut(), grad);
        terms.iter().zip(ces).map(|(t, ce)| t.scale * ce).sum()
    })
}

/// Batch objective in evaluation mode.
pub fn batch_loss(model: &MtlModel, batch: &[&EncodedExample], kind: ModelKind, weights: LossWeights) -> f64 {
    let terms = batch_terms(batch, kind, weights);
    batch
        .par_iter()
        .zip(&terms)
        .map(|(ex, terms)| {
            let heads: Vec<_> = terms.iter().map(|t| t.head).collect();
            let logits = model.logits(&ex.seq, &heads);
            terms
                .iter()
                .zip(logits)
                .filter(|(t, _)| t.scale != 0.0)
                .map(|(t, z)| t.scale * cross_entropy(z.as_slice().unwrap(), t.target))
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

/// Tracks validation scores; an epoch improves only if it beats the best
/// score so far strictly.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: 0, since_best: 0 }
    }

    /// Records the score of `epoch` (1-based). Returns `true` if it is a
    /// new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some(best) if score <= best => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some(score);
                self.best_epoch = epoch;
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Replays a validation trace through [`EarlyStopping`]; returns
/// `(best_epoch, stopped_epoch)`.
pub fn replay_early_stopping(trace: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut stopper = EarlyStopping::new(patience);
    let mut last = 0;
    for (i, &score) in trace.iter().take(max_epochs).enumerate() {
        last = i + 1;
        stopper.observe(last, score);
        if stopper.should_stop() {
            break;
        }
    }
    (stopper.best_epoch(), last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation macro-F1 of tasks A, B, C; B and C are absent for the
    /// baseline and for validation sets without gold B/C labels.
    pub val_f1: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_f1_a: f64,
}

impl TrainHistory {
    pub fn early_stopped(&self, max_epochs: usize) -> bool {
        self.stopped_epoch < max_epochs
    }

    /// One line per epoch followed by a summary line.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "epoch {} train_loss {:.6} val_f1_a {} val_f1_b {} val_f1_c {}",
                r.epoch,
                r.train_loss,
                fmt(r.val_f1[0]),
                fmt(r.val_f1[1]),
                fmt(r.val_f1[2])
            );
        }
        let _ = writeln!(
            out,
            "best_epoch {} stopped_epoch {} best_val_f1_a {:.6}",
            self.best_epoch, self.stopped_epoch, self.best_val_f1_a
        );
        out
    }
}

/// Validation macro-F1 per task.
pub fn validation_f1(model: &MtlModel, val: &[EncodedExample], kind: ModelKind) -> Result<[Option<f64>; 3], TrainError> {
    let seqs: Vec<TokenSequence> = val.iter().map(|ex| ex.seq.clone()).collect();
    let golds: Vec<Gold> = val.iter().map(|ex| ex.gold).collect();
    match kind {
        ModelKind::Baseline => {
            let preds: Vec<TaskLabelA> = model.forward_baseline(&seqs)?.into_iter().map(|p| p.label).collect();
            let gold_a: Vec<TaskLabelA> = golds.iter().map(|g| g.labels.a()).collect();
            Ok([Some(macro_f1(&gold_a, &preds, TaskLabelA::ALL)?), None, None])
        }
        ModelKind::Mtl => {
            let report = report_from_predictions(&golds, &model.forward_mtl(&seqs)?)?;
            Ok([Some(report.a.macro_f1), report.b.map(|r| r.macro_f1), report.c.map(|r| r.macro_f1)])
        }
    }
}

/// Mini-batch training state for one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MtlModel,
    pub config: TrainConfig,
    optimizer: Adam,
    shuffle: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: MtlModel, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            model,
            optimizer: Adam::new(config.learning_rate),
            shuffle: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            config,
        })
    }

    fn dropout_seed(&self, step: usize) -> Option<u64> {
        (self.model.encoder_config().dropout > 0.0)
            .then(|| mix(self.config.seed, [self.epoch as u64, step as u64, 1]))
    }

    /// One optimizer step on `batch`; returns the batch objective before the
    /// update.
    pub fn step(&mut self, batch: &[&EncodedExample], step: usize) -> Result<f64, TrainError> {
        let seed = self.dropout_seed(step);
        let (grad, loss) = batch_gradient(&self.model, batch, self.config.kind, self.config.loss_weights, seed);
        if !loss.is_finite() || !grad.all_finite() {
            return Err(TrainError::NonFinite { epoch: self.epoch, step, loss });
        }
        self.optimizer.step(&mut self.model, &grad);
        Ok(loss)
    }

    /// A shuffled pass over `train`; returns the mean batch objective.
    pub fn run_epoch(&mut self, train: &[EncodedExample]) -> Result<f64, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Empty("training"));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch, step)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

fn check_inputs(model: &MtlModel, seqs: impl IntoIterator<Item = TokenSequence>) -> Result<(), TrainError> {
    seqs.into_iter().try_for_each(|s| model.encoder.check_sequence(&s)).map_err(TrainError::from)
}

/// Trains until validation F1(A) stops improving for `patience` epochs or
/// `max_epochs` is reached, and returns the parameters of the best epoch.
pub fn train(
    model: MtlModel,
    train: &[EncodedExample],
    val: &[EncodedExample],
    config: &TrainConfig,
) -> Result<(MtlModel, TrainHistory), TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    check_inputs(&model, train.iter().chain(val).map(|ex| ex.seq.clone()))?;
    let mut trainer = Trainer::new(model, *config)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_model = trainer.model.clone();
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        let train_loss = trainer.run_epoch(train)?;
        let val_f1 = validation_f1(&trainer.model, val, config.kind)?;
        epochs.push(EpochRecord { epoch, train_loss, val_f1 });
        if stopper.observe(epoch, val_f1[0].unwrap_or(0.0)) {
            best_model = trainer.model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let history = TrainHistory {
        stopped_epoch: epochs.len(),
        best_epoch: stopper.best_epoch(),
        best_val_f1_a: stopper.best().unwrap_or(0.0),
        epochs,
    };
    Ok((best_model, history))
}

/// Trains `k` members in parallel; member `i` uses seed `config.seed + i`
/// for both initialization (through `init`) and training.
pub fn train_ensemble<I>(
    init: I,
    k: usize,
    train_set: &[EncodedExample],
    val: &[EncodedExample],
    config: &TrainConfig,
) -> Result<Vec<(MtlModel, TrainHistory)>, TrainError>
where
    I: Fn(u64) -> Result<MtlModel, ModelError> + Sync,
{
    if k == 0 {
        return Err(TrainError::InvalidConfig("ensemble size must be at least 1".into()));
    }
    (0..k as u64)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_add(i);
            let member_config = TrainConfig { seed, ..*config };
            train(init(seed)?, train_set, val, &member_config)
        })
        .collect()
}

/// Encoder plus a scalar sigmoid head on the CLS embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub encoder: Encoder,
    pub head: Linear,
}

impl Params for RegressionModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.head.collect(&join(prefix, "regression"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.encoder.collect_mut(out);
        self.head.collect_mut(out);
    }
}

impl RegressionModel {
    /// Wraps `encoder` with a freshly initialized head.
    pub fn new(encoder: Encoder, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Linear::new(&mut rng, encoder.config.d_model, 1);
        Self { encoder, head }
    }

    pub fn predict(&self, seq: &TokenSequence) -> f64 {
        let (hidden, _) = self.encoder.forward_sequence(seq, None);
        sigmoid(self.head.forward_vec(hidden.row(0))[0])
    }

    /// Mean squared error over `data` in evaluation mode.
    pub fn mse(&self, data: &[EncodedScored]) -> f64 {
        let errors: Vec<f64> = data.par_iter().map(|ex| (self.predict(&ex.seq) - ex.target).powi(2)).collect();
        errors.iter().sum::<f64>() / data.len() as f64
    }

    /// Gradient of the batch MSE and its value.
    pub fn batch_gradient(&self, batch: &[&EncodedScored], dropout_seed: Option<u64>) -> (RegressionModel, f64) {
        let n = batch.len() as f64;
        chunked_gradient(self, batch, |i, ex, grad| {
            let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(mix(s, [i as u64, 0, 0])));
            let (hidden, cache) = self.encoder.forward_sequence(&ex.seq, rng.as_mut());
            let p = sigmoid(self.head.forward_vec(hidden.row(0))[0]);
            let err = p - ex.target;
            let dz = ndarray::arr1(&[2.0 * err * p * (1.0 - p) / n]);
            let d_cls = self.head.backward_vec(hidden.row(0), dz.view(), &mut grad.head);
            let mut d_hidden = Array2::zeros(hidden.raw_dim());
            d_hidden.row_mut(0).assign(&d_cls);
            self.encoder.backward(&cache, d_hidden, &mut grad.encoder);
            err * err / n
        })
    }
}

/// Per-epoch evaluation-mode MSE over the scored corpus, starting with the
/// value before training.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHistory {
    pub initial_mse: f64,
    pub epoch_mse: Vec<f64>,
}

impl RegressionHistory {
    pub fn to_text(&self) -> String {
        let mut out = format!("epoch 0 mse {:.8}\n", self.initial_mse);
        for (i, mse) in self.epoch_mse.iter().enumerate() {
            let _ = writeln!(out, "epoch {} mse {mse:.8}", i + 1);
        }
        out
    }
}

/// Fits the encoder to `avg_conf` through a temporary regression head, then
/// returns the model with the updated encoder; the head is discarded and
/// the task heads are untouched. Runs `max_epochs` epochs.
pub fn pretrain_regression(
    model: MtlModel,
    scored: &[EncodedScored],
    config: &TrainConfig,
) -> Result<(MtlModel, RegressionHistory), TrainError> {
    config.validate()?;
    if scored.is_empty() {
        return Err(TrainError::Empty("scored"));
    }
    check_inputs(&model, scored.iter().map(|ex| ex.seq.clone()))?;
    let mut model = model;
    let mut reg = RegressionModel::new(model.encoder.clone(), mix(config.seed, [0, 0, 2]));
    let mut optimizer = Adam::new(config.learning_rate);
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    let use_dropout = reg.encoder.config.dropout > 0.0;
    let initial_mse = reg.mse(scored);
    let mut epoch_mse = Vec::with_capacity(config.max_epochs);
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.shuffle(&mut shuffle);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedScored> = idx.iter().map(|&i| &scored[i]).collect();
            let seed = use_dropout.then(|| mix(config.seed, [epoch as u64, step as u64, 3]));
            let (grad, loss) = reg.batch_gradient(&batch, seed);
            if !loss.is_finite() || !grad.all_finite() {
                return Err(TrainError::NonFinite { epoch, step, loss });
            }
            optimizer.step(&mut reg, &grad);
        }
        epoch_mse.push(reg.mse(scored));
    }
    model.encoder = reg.encoder;
    Ok((model, RegressionHistory { initial_mse, epoch_mse }))
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor name and flat offset of the worst entry.
    pub worst: (String, usize),
    pub n_params: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Applies `f` to the flat entry `i` of `params`.
fn with_entry<P: Params, R>(params: &mut P, i: usize, f: impl FnOnce(&mut f64) -> R) -> R {
    let mut slots = Vec::new();
    params.collect_mut(&mut slots);
    let mut offset = i;
    for slot in slots {
        if offset < slot.len() {
            return f(&mut slot[offset]);
        }
        offset -= slot.len();
    }
    panic!("parameter index {i} out of range");
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter of `params`.
pub fn check_gradients_with<P, F>(params: &P, analytic: &P, loss: F, epsilon: f64) -> Result<GradCheckReport, TrainError>
where
    P: Params + Send + Sync,
    F: Fn(&P) -> f64 + Sync,
{
    let base = loss(params);
    if !base.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, step: 0, loss: base });
    }
    let grads = analytic.flatten();
    let names: Vec<(String, usize)> =
        params.tensors().into_iter().flat_map(|t| (0..t.data.len()).map(move |j| (t.name.clone(), j))).collect();
    let n = grads.len();
    let chunk = n.div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let errors: Vec<Result<(f64, usize), TrainError>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|indices| {
            let mut local = params.clone();
            let mut worst = (0.0f64, indices[0]);
            for &i in indices {
                let original = with_entry(&mut local, i, |x| std::mem::replace(x, 0.0));
                with_entry(&mut local, i, |x| *x = original + epsilon);
                let plus = loss(&local);
                with_entry(&mut local, i, |x| *x = original - epsilon);
                let minus = loss(&local);
                with_entry(&mut local, i, |x| *x = original);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(TrainError::NonFinite { epoch: 0, step: i, loss: if plus.is_finite() { minus } else { plus } });
                }
                let numeric = (plus - minus) / (2.0 * epsilon);
                let err = relative_error(grads[i], numeric);
                if err > worst.0 {
                    worst = (err, i);
                }
            }
            Ok(worst)
        })
        .collect();
    let mut max = (0.0, 0);
    for e in errors {
        let (err, i) = e?;
        if err > max.0 {
            max = (err, i);
        }
    }
    Ok(GradCheckReport { max_relative_error: max.0, worst: names[max.1].clone(), n_params: n, loss: base })
}

/// Finite-difference check of the full objective of `kind` on `batch`,
/// with dropout disabled.
pub fn check_gradients(
    model: &MtlModel,
    batch: &[EncodedExample],
    epsilon: f64,
    kind: ModelKind,
    weights: LossWeights,
) -> Result<GradCheckReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty("gradient-check"));
    }
    check_inputs(model, batch.iter().map(|ex| ex.seq.clone()))?;
    let refs: Vec<&EncodedExample> = batch.iter().collect();
    let (analytic, loss) = batch_gradient(model, &refs, kind, weights, None);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, step: 0, loss });
    }
    check_gradients_with(model, &analytic, |m| batch_loss(m, &refs, kind, weights), epsilon)
}
