//! Multi-task model: one shared encoder, an LSTM head per sub-task, and a
//! linear CLS head used by the single-task baseline.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, LabelTriple, LabeledExample, TaskLabelA, TaskLabelB, TaskLabelC};
use crate::encoder::{Encoder, EncoderCache, EncoderConfig, ModelError};
use crate::params::{cross_entropy, join, sigmoid, softmax, uniform_matrix, Linear, NamedTensor, Params};
use crate::textnorm::Normalizer;
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// LSTM hidden width.
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// Which head answers sub-task A: the LSTM heads of the multi-task model
/// or the linear CLS baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mtl,
    Baseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mtl => "mtl",
            ModelKind::Baseline => "baseline",
        }
    }
}

/// Which output a loss term reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    A,
    B,
    C,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LossWeights {
    a: f64,
    b: f64,
    c: f64,
}

impl LossWeights {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, ModelError> {
        let ok = [a, b, c].iter().all(|w| w.is_finite() && *w >= 0.0) && (a + b + c - 1.0).abs() <= 1e-9;
        if ok {
            Ok(Self { a, b, c })
        } else {
            Err(ModelError::InvalidConfig(format!("loss weights ({a}, {b}, {c}) must be nonnegative and sum to 1")))
        }
    }

    /// 0.4 / 0.3 / 0.3.
    pub fn paper() -> Self {
        Self { a: 0.4, b: 0.3, c: 0.3 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::paper()
    }
}

impl TryFrom<[f64; 3]> for LossWeights {
    type Error = ModelError;

    fn try_from(w: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(w[0], w[1], w[2])
    }
}

impl From<LossWeights> for [f64; 3] {
    fn from(w: LossWeights) -> Self {
        w.as_array()
    }
}

/// Single-layer unidirectional LSTM whose final hidden state is projected
/// to class logits. Gate blocks are laid out `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmHead {
    pub input_weight: Array2<f64>,
    pub hidden_weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub output: Linear,
}

struct LstmCache {
    /// Activated gates per step, `[len, 4h]`.
    gates: Array2<f64>,
    /// Cell states `c_0..c_len` (row 0 is the zero initial state).
    cells: Array2<f64>,
    hiddens: Array2<f64>,
}

impl LstmHead {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize, n_classes: usize) -> Self {
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self {
            input_weight: uniform_matrix(rng, input, 4 * hidden, 1.0 / (input as f64).sqrt()),
            hidden_weight: uniform_matrix(rng, hidden, 4 * hidden, 1.0 / (hidden as f64).sqrt()),
            bias,
            output: Linear::new(rng, hidden, n_classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_weight.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.output.fan_out()
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array1<f64>, LstmCache) {
        let h = self.hidden();
        let len = x.nrows();
        let projected = x.dot(&self.input_weight) + &self.bias;
        let mut gates = Array2::zeros((len, 4 * h));
        let mut cells = Array2::<f64>::zeros((len + 1, h));
        let mut hiddens = Array2::<f64>::zeros((len + 1, h));
        for t in 0..len {
            let z = &projected.row(t) + &hiddens.row(t).dot(&self.hidden_weight);
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let g_g = z[2 * h + j].tanh();
                let o_g = sigmoid(z[3 * h + j]);
                let c = f_g * cells[[t, j]] + i_g * g_g;
                cells[[t + 1, j]] = c;
                hiddens[[t + 1, j]] = o_g * c.tanh();
                gates[[t, j]] = i_g;
                gates[[t, h + j]] = f_g;
                gates[[t, 2 * h + j]] = g_g;
                gates[[t, 3 * h + j]] = o_g;
            }
        }
        let logits = self.output.forward_vec(hiddens.row(len));
        (logits, LstmCache { gates, cells, hiddens })
    }

    fn backward(&self, cache: &LstmCache, x: ArrayView2<f64>, d_logits: &Array1<f64>, grad: &mut LstmHead) -> Array2<f64> {
        let h = self.hidden();
        let len = x.nrows();
        let mut dh = self.output.backward_vec(cache.hiddens.row(len), d_logits.view(), &mut grad.output);
        let mut dc = Array1::<f64>::zeros(h);
        let mut dz = Array2::zeros((len, 4 * h));
        for t in (0..len).rev() {
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) =
                    (cache.gates[[t, j]], cache.gates[[t, h + j]], cache.gates[[t, 2 * h + j]], cache.gates[[t, 3 * h + j]]);
                let tc = cache.cells[[t + 1, j]].tanh();
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o_g * (1.0 - tc * tc);
                dz[[t, j]] = dcj * g_g * i_g * (1.0 - i_g);
                dz[[t, h + j]] = dcj * cache.cells[[t, j]] * f_g * (1.0 - f_g);
                dz[[t, 2 * h + j]] = dcj * i_g * (1.0 - g_g * g_g);
                dz[[t, 3 * h + j]] = d_o * o_g * (1.0 - o_g);
                dc[j] = dcj * f_g;
            }
            dh = self.hidden_weight.dot(&dz.row(t));
        }
        grad.input_weight += &x.t().dot(&dz);
        grad.hidden_weight += &cache.hiddens.slice(s![..len, ..]).t().dot(&dz);
        grad.bias += &dz.sum_axis(Axis(0));
        dz.dot(&self.input_weight.t())
    }
}

impl Params for LstmHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.input_weight.collect(&join(prefix, "input_weight"), out);
        self.hidden_weight.collect(&join(prefix, "hidden_weight"), out);
        self.bias.collect(&join(prefix, "bias"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.input_weight.collect_mut(out);
        self.hidden_weight.collect_mut(out);
        self.bias.collect_mut(out);
        self.output.collect_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlModel {
    pub head_config: HeadConfig,
    pub encoder: Encoder,
    pub head_a: LstmHead,
    pub head_b: LstmHead,
    pub head_c: LstmHead,
    /// CLS-position linear classifier over {OFF, NOT}.
    pub baseline: Linear,
}

impl Params for MtlModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.head_a.collect(&join(prefix, "head_a"), out);
        self.head_b.collect(&join(prefix, "head_b"), out);
        self.head_c.collect(&join(prefix, "head_c"), out);
        self.baseline.collect(&join(prefix, "baseline"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.encoder.collect_mut(out);
        self.head_a.collect_mut(out);
        self.head_b.collect_mut(out);
        self.head_c.collect_mut(out);
        self.baseline.collect_mut(out);
    }
}

/// Class distribution of one head plus its argmax label.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction<L> {
    pub probs: Vec<f64>,
    pub label: L,
}

impl<L: ClassLabel> TaskPrediction<L> {
    /// Softmax of `logits`; the first maximal class wins the argmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax(logits);
        Self::from_probs(probs)
    }

    pub fn from_probs(probs: Vec<f64>) -> Self {
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        Self { label: L::from_index(best), probs }
    }

    pub fn prob(&self, label: L) -> f64 {
        self.probs[label.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriple {
    pub a: TaskPrediction<TaskLabelA>,
    pub b: TaskPrediction<TaskLabelB>,
    pub c: TaskPrediction<TaskLabelC>,
}

/// Gold labels as seen by the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gold {
    pub labels: LabelTriple,
    /// Synthetic examples only contribute to the A loss.
    pub synthetic: bool,
}

impl From<&LabeledExample> for Gold {
    fn from(ex: &LabeledExample) -> Self {
        Self { labels: ex.labels, synthetic: ex.synthetic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtlLoss {
    pub total: f64,
    /// Mean cross-entropy per task; 0 where no example contributed.
    pub per_task: [f64; 3],
    /// Number of contributing examples per task.
    pub counts: [usize; 3],
}

impl MtlLoss {
    pub fn is_empty(&self, task: usize) -> bool {
        self.counts[task] == 0
    }
}

/// `L = w_A L_A + w_B L_B + w_C L_C` with each `L_i` the mean
/// cross-entropy of head `i` over its contributing examples.
pub fn mtl_loss(predictions: &[PredictionTriple], gold: &[Gold], weights: LossWeights) -> Result<MtlLoss, ModelError> {
    if predictions.len() != gold.len() {
        return Err(ModelError::Mismatch(format!(
            "{} predictions but {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (p, g) in predictions.iter().zip(gold) {
        sums[0] -= p.a.prob(g.labels.a()).ln();
        counts[0] += 1;
        if !g.synthetic {
            sums[1] -= p.b.prob(g.labels.b()).ln();
            sums[2] -= p.c.prob(g.labels.c()).ln();
            counts[1] += 1;
            counts[2] += 1;
        }
    }
    let per_task = [0, 1, 2].map(|i| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 });
    Ok(MtlLoss { total: combine_losses(per_task, weights), per_task, counts })
}

pub fn combine_losses(per_task: [f64; 3], weights: LossWeights) -> f64 {
    let w = weights.as_array();
    w[0] * per_task[0] + w[1] * per_task[1] + w[2] * per_task[2]
}

/// One cross-entropy term of a per-example loss: `scale * CE(head, target)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub head: Head,
    pub target: usize,
    pub scale: f64,
}

impl MtlModel {
    pub fn init(encoder_config: EncoderConfig, head_config: HeadConfig, seed: u64) -> Result<Self, ModelError> {
        if head_config.hidden == 0 {
            return Err(ModelError::InvalidConfig("head hidden width must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init_with(encoder_config, &mut rng)?;
        let d = encoder_config.d_model;
        let h = head_config.hidden;
        Ok(Self {
            head_config,
            head_a: LstmHead::new(&mut rng, d, h, TaskLabelA::n_classes()),
            head_b: LstmHead::new(&mut rng, d, h, TaskLabelB::n_classes()),
            head_c: LstmHead::new(&mut rng, d, h, TaskLabelC::n_classes()),
            baseline: Linear::new(&mut rng, d, TaskLabelA::n_classes()),
            encoder,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    fn lstm(&self, head: Head) -> Option<&LstmHead> {
        match head {
            Head::A => Some(&self.head_a),
            Head::B => Some(&self.head_b),
            Head::C => Some(&self.head_c),
            Head::Baseline => None,
        }
    }

    fn check_batch(&self, batch: &[TokenSequence]) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        batch.iter().try_for_each(|s| self.encoder.check_sequence(s))
    }

    /// Logits of each requested head for one sequence, evaluation mode.
    pub fn logits(&self, seq: &TokenSequence, heads: &[Head]) -> Vec<Array1<f64>> {
        let (hidden, _) = self.encoder.forward_sequence(seq, None);
        heads
            .iter()
            .map(|&head| match self.lstm(head) {
                Some(lstm) => lstm.forward(hidden.view()).0,
                None => self.baseline.forward_vec(hidden.row(0)),
            })
            .collect()
    }

    fn predict_sequence(&self, seq: &TokenSequence) -> PredictionTriple {
        let logits = self.logits(seq, &[Head::A, Head::B, Head::C]);
        PredictionTriple {
            a: TaskPrediction::from_logits(logits[0].as_slice().unwrap()),
            b: TaskPrediction::from_logits(logits[1].as_slice().unwrap()),
            c: TaskPrediction::from_logits(logits[2].as_slice().unwrap()),
        }
    }

    /// Runs every task head over the encoder output of each sequence.
    pub fn forward_mtl(&self, batch: &[TokenSequence]) -> Result<Vec<PredictionTriple>, ModelError> {
        self.check_batch(batch)?;
        Ok(batch.par_iter().map(|seq| self.predict_sequence(seq)).collect())
    }

    /// CLS embedding -> linear -> softmax over {OFF, NOT}.
    pub fn forward_baseline(&self, batch: &[TokenSequence]) -> Result<Vec<TaskPrediction<TaskLabelA>>, ModelError> {
        self.check_batch(batch)?;
        Ok(batch
            .par_iter()
            .map(|seq| {
                let logits = &self.logits(seq, &[Head::Baseline])[0];
                TaskPrediction::from_logits(logits.as_slice().unwrap())
            })
            .collect())
    }

    /// Forward + backward for one sequence under a sum of scaled
    /// cross-entropy terms. Gradients are added to `grad`; the unscaled
    /// cross-entropy of every term is returned. Terms with zero scale are
    /// skipped entirely.
    pub fn accumulate_gradients(
        &self,
        seq: &TokenSequence,
        terms: &[LossTerm],
        rng: Option<&mut ChaCha8Rng>,
        grad: &mut MtlModel,
    ) -> Vec<f64> {
        let (hidden, cache) = self.encoder.forward_sequence(seq, rng);
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        let mut losses = vec![0.0; terms.len()];
        for (term, loss) in terms.iter().zip(losses.iter_mut()) {
            if term.scale == 0.0 {
                continue;
            }
            match term.head {
                Head::Baseline => {
                    let logits = self.baseline.forward_vec(hidden.row(0));
                    let (ce, d_logits) = ce_and_grad(&logits, term.target, term.scale);
                    *loss = ce;
                    let d_cls = self.baseline.backward_vec(hidden.row(0), d_logits.view(), &mut grad.baseline);
                    let mut row = d_hidden.row_mut(0);
                    row += &d_cls;
                }
                head => {
                    let lstm = self.lstm(head).expect("task head");
                    let (logits, lstm_cache) = lstm.forward(hidden.view());
                    let (ce, d_logits) = ce_and_grad(&logits, term.target, term.scale);
                    *loss = ce;
                    let lstm_grad = match head {
                        Head::A => &mut grad.head_a,
                        Head::B => &mut grad.head_b,
                        _ => &mut grad.head_c,
                    };
                    d_hidden += &lstm.backward(&lstm_cache, hidden.view(), &d_logits, lstm_grad);
                }
            }
        }
        self.encoder.backward(&cache, d_hidden, &mut grad.encoder);
        losses
    }

    /// Encoder output rows and cache for external heads.
    pub fn encode_for_training(&self, seq: &TokenSequence, rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, EncoderCache) {
        self.encoder.forward_sequence(seq, rng)
    }
}

/// Cross-entropy and `scale * (softmax - onehot)`.
fn ce_and_grad(logits: &Array1<f64>, target: usize, scale: f64) -> (f64, Array1<f64>) {
    let z = logits.as_slice().expect("contiguous logits");
    let ce = cross_entropy(z, target);
    let mut d = Array1::from(softmax(z));
    d[target] -= 1.0;
    (ce, d * scale)
}

/// Loss terms for the multi-task objective over a batch: head `i` gets
/// scale `w_i / n_i` where `n_i` counts the examples that contribute to it.
pub fn mtl_terms(gold: &[Gold], weights: LossWeights) -> Vec<Vec<LossTerm>> {
    let n_a = gold.len();
    let n_bc = gold.iter().filter(|g| !g.synthetic).count();
    let w = weights.as_array();
    gold.iter()
        .map(|g| {
            let mut terms = vec![LossTerm { head: Head::A, target: g.labels.a().index(), scale: w[0] / n_a as f64 }];
            if !g.synthetic {
                terms.push(LossTerm { head: Head::B, target: g.labels.b().index(), scale: w[1] / n_bc as f64 });
                terms.push(LossTerm { head: Head::C, target: g.labels.c().index(), scale: w[2] / n_bc as f64 });
            }
            terms
        })
        .collect()
}

pub fn baseline_terms(gold: &[Gold]) -> Vec<Vec<LossTerm>> {
    let n = gold.len() as f64;
    gold.iter()
        .map(|g| vec![LossTerm { head: Head::Baseline, target: g.labels.a().index(), scale: 1.0 / n }])
        .collect()
}

/// Normalize -> encode -> forward for a single raw text.
pub fn predict(
    model: &MtlModel,
    vocab: &Vocabulary,
    normalizer: &Normalizer,
    text: &str,
) -> Result<PredictionTriple, ModelError> {
    let normalized = normalizer.normalize_text(text);
    let seq = vocab.encode(&normalized, model.encoder_config().max_len);
    Ok(model.forward_mtl(std::slice::from_ref(&seq))?.remove(0))
}
