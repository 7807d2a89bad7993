//! BERT-style transformer encoder with hand-written backpropagation.
//!
//! Token + learned position embeddings feed a layer norm and then
//! `n_layers` post-norm blocks (multi-head self-attention, GELU
//! feed-forward). Only unmasked positions take part in the computation, so
//! attention never looks at padding and padded output rows are zero.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{
    gelu, gelu_grad, join, softmax_rows_inplace, uniform_matrix, LayerNorm, LayerNormCache, Linear, NamedTensor,
    Params,
};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of length {len} exceeds the {max_len} learned positions")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 2, d_ffn: 128, max_len: 64, vocab_size: 3, dropout: 0.1 }
    }
}

impl EncoderConfig {
    /// A configuration small enough for exhaustive gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self { d_model: 16, n_layers: 2, n_heads: 2, d_ffn: 32, max_len: 16, vocab_size, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.vocab_size == 0 {
            return bad("all dimensions must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl Params for EncoderLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.output.collect(&join(prefix, "output"), out);
        self.attention_norm.collect(&join(prefix, "attention_norm"), out);
        self.ffn_in.collect(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect(&join(prefix, "ffn_out"), out);
        self.ffn_norm.collect(&join(prefix, "ffn_norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.query.collect_mut(out);
        self.key.collect_mut(out);
        self.value.collect_mut(out);
        self.output.collect_mut(out);
        self.attention_norm.collect_mut(out);
        self.ffn_in.collect_mut(out);
        self.ffn_out.collect_mut(out);
        self.ffn_norm.collect_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

impl Params for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.token_embedding.collect(&join(prefix, "token_embedding"), out);
        self.position_embedding.collect(&join(prefix, "position_embedding"), out);
        self.embedding_norm.collect(&join(prefix, "embedding_norm"), out);
        self.layers.collect(&join(prefix, "layers"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.token_embedding.collect_mut(out);
        self.position_embedding.collect_mut(out);
        self.embedding_norm.collect_mut(out);
        self.layers.collect_mut(out);
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEmbeddings {
    /// `[batch, max_len, d_model]`; padded rows are zero.
    pub values: Array3<f64>,
    pub masks: Vec<Vec<u8>>,
}

/// Inverted dropout; `None` means evaluation mode.
pub(crate) fn dropout_mask(rng: Option<&mut ChaCha8Rng>, rate: f64, shape: (usize, usize)) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }))
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attention_dropout: Option<Array2<f64>>,
    attention_norm: LayerNormCache,
    hidden: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
    ffn_norm: LayerNormCache,
}

/// Everything the backward pass needs from one forward pass.
pub struct EncoderCache {
    ids: Vec<u32>,
    positions: Vec<usize>,
    embedding_norm: LayerNormCache,
    embedding_dropout: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

impl EncoderLayer {
    fn new(rng: &mut ChaCha8Rng, c: &EncoderConfig) -> Self {
        Self {
            query: Linear::new(rng, c.d_model, c.d_model),
            key: Linear::new(rng, c.d_model, c.d_model),
            value: Linear::new(rng, c.d_model, c.d_model),
            output: Linear::new(rng, c.d_model, c.d_model),
            attention_norm: LayerNorm::new(c.d_model),
            ffn_in: Linear::new(rng, c.d_model, c.d_ffn),
            ffn_out: Linear::new(rng, c.d_ffn, c.d_model),
            ffn_norm: LayerNorm::new(c.d_model),
        }
    }

    fn forward(&self, x: Array2<f64>, c: &EncoderConfig, mut rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, LayerCache) {
        let len = x.nrows();
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(x.view());
        let k = self.key.forward(x.view());
        let v = self.value.forward(x.view());
        let mut context = Array2::zeros((len, c.d_model));
        let mut probs = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_inplace(&mut p);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let attention_dropout = dropout_mask(rng.as_deref_mut(), c.dropout, (len, c.d_model));
        let attended = apply_mask(self.output.forward(context.view()), &attention_dropout);
        let (hidden, attention_norm) = self.attention_norm.forward((&x + &attended).view());

        let pre_activation = self.ffn_in.forward(hidden.view());
        let activation = pre_activation.mapv(gelu);
        let ffn_dropout = dropout_mask(rng, c.dropout, (len, c.d_model));
        let ffn = apply_mask(self.ffn_out.forward(activation.view()), &ffn_dropout);
        let (out, ffn_norm) = self.ffn_norm.forward((&hidden + &ffn).view());

        let cache = LayerCache {
            input: x,
            q,
            k,
            v,
            probs,
            context,
            attention_dropout,
            attention_norm,
            hidden,
            pre_activation,
            activation,
            ffn_dropout,
            ffn_norm,
        };
        (out, cache)
    }

    fn backward(&self, cache: &LayerCache, d_out: ArrayView2<f64>, c: &EncoderConfig, grad: &mut EncoderLayer) -> Array2<f64> {
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let d_res2 = self.ffn_norm.backward(&cache.ffn_norm, d_out, &mut grad.ffn_norm);
        let d_ffn = apply_mask(d_res2.clone(), &cache.ffn_dropout);
        let d_act = self.ffn_out.backward(cache.activation.view(), d_ffn.view(), &mut grad.ffn_out);
        let d_pre = d_act * &cache.pre_activation.mapv(gelu_grad);
        let d_hidden = d_res2 + self.ffn_in.backward(cache.hidden.view(), d_pre.view(), &mut grad.ffn_in);

        let d_res1 = self.attention_norm.backward(&cache.attention_norm, d_hidden.view(), &mut grad.attention_norm);
        let d_attended = apply_mask(d_res1.clone(), &cache.attention_dropout);
        let d_context = self.output.backward(cache.context.view(), d_attended.view(), &mut grad.output);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dc = d_context.slice(cols);
            let dp = dc.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dc));
            // softmax backward, row by row
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.input.view();
        d_res1
            + self.query.backward(x, dq.view(), &mut grad.query)
            + self.key.backward(x, dk.view(), &mut grad.key)
            + self.value.backward(x, dv.view(), &mut grad.value)
    }
}

impl Encoder {
    /// Deterministic initialization from `seed`: embeddings uniform in
    /// ±0.05, linear maps uniform in ±1/sqrt(fan_in).
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init_with(config, &mut rng)?)
    }

    pub fn init_with(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            config,
            token_embedding: uniform_matrix(rng, c.vocab_size, c.d_model, 0.05),
            position_embedding: uniform_matrix(rng, c.max_len, c.d_model, 0.05),
            embedding_norm: LayerNorm::new(c.d_model),
            layers: (0..c.n_layers).map(|_| EncoderLayer::new(rng, c)).collect(),
        })
    }

    pub fn check_sequence(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        if seq.ids.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong { len: seq.ids.len(), max_len: self.config.max_len });
        }
        if seq.ids.len() != seq.mask.len() {
            return Err(ModelError::Mismatch("ids and mask lengths differ".into()));
        }
        match seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab_size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Runs the encoder over the real positions of one sequence. Returns
    /// one row per unmasked position, in order.
    ///
    /// `rng` enables dropout; the sequence must already be validated.
    pub fn forward_sequence(&self, seq: &TokenSequence, rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, EncoderCache) {
        let (positions, ids): (Vec<usize>, Vec<u32>) = seq.real_positions().unzip();
        self.forward_tokens(ids, positions, rng)
    }

    fn forward_tokens(
        &self,
        ids: Vec<u32>,
        positions: Vec<usize>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, EncoderCache) {
        let c = &self.config;
        let len = ids.len();
        let mut embedded = Array2::zeros((len, c.d_model));
        for (t, (&id, &p)) in ids.iter().zip(&positions).enumerate() {
            let mut row = embedded.row_mut(t);
            row += &self.token_embedding.row(id as usize);
            row += &self.position_embedding.row(p);
        }
        let (normed, embedding_norm) = self.embedding_norm.forward(embedded.view());
        let embedding_dropout = dropout_mask(rng.as_deref_mut(), c.dropout, (len, c.d_model));
        let mut x = apply_mask(normed, &embedding_dropout);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(x, c, rng.as_deref_mut());
            layers.push(cache);
            x = out;
        }
        (x, EncoderCache { ids, positions, embedding_norm, embedding_dropout, layers })
    }

    /// Accumulates parameter gradients for `d_out` (one row per real
    /// position) into `grad`.
    pub fn backward(&self, cache: &EncoderCache, d_out: Array2<f64>, grad: &mut Encoder) {
        let mut d = d_out;
        for (layer, (lc, lg)) in self.layers.iter().zip(cache.layers.iter().zip(grad.layers.iter_mut())).rev() {
            d = layer.backward(lc, d.view(), &self.config, lg);
        }
        let d = apply_mask(d, &cache.embedding_dropout);
        let d_embedded = self.embedding_norm.backward(&cache.embedding_norm, d.view(), &mut grad.embedding_norm);
        for (t, (&id, &p)) in cache.ids.iter().zip(&cache.positions).enumerate() {
            let row = d_embedded.row(t);
            let mut tok = grad.token_embedding.row_mut(id as usize);
            tok += &row;
            let mut pos = grad.position_embedding.row_mut(p);
            pos += &row;
        }
    }

    /// Batched evaluation-mode forward pass.
    pub fn forward(&self, batch: &[TokenSequence]) -> Result<ContextualEmbeddings, ModelError> {
        let Some(first) = batch.first() else {
            return Err(ModelError::EmptyBatch);
        };
        let max_len = first.max_len();
        for seq in batch {
            self.check_sequence(seq)?;
            if seq.max_len() != max_len {
                return Err(ModelError::Mismatch("sequences in a batch must share max_len".into()));
            }
        }
        let mut values = Array3::zeros((batch.len(), max_len, self.config.d_model));
        for (b, seq) in batch.iter().enumerate() {
            let (out, cache) = self.forward_sequence(seq, None);
            for (row, &p) in out.rows().into_iter().zip(&cache.positions) {
                values.slice_mut(s![b, p, ..]).assign(&row);
            }
        }
        Ok(ContextualEmbeddings { values, masks: batch.iter().map(|s| s.mask.clone()).collect() })
    }
}
