//! Versioned plain-text container for a trained model and its vocabulary.
//!
//! Layout:
//!
//! ```text
//! offense-mtl-checkpoint 1
//! @config {"kind":"mtl","encoder":{..},"head":{..},"loss_weights":[..]}
//! @vocab <n>
//! <token>\t<id>            (n lines)
//! @param <name> <d0>x<d1>..
//! <values separated by spaces>
//! ...
//! @end
//! ```
//!
//! Floats are written in shortest round-trip exponent form, so a save/load
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, ModelError};
use crate::mtl::{HeadConfig, LossWeights, ModelKind, MtlModel, PredictionTriple, TaskPrediction};
use crate::corpus::TaskLabelA;
use crate::params::Params;
use crate::textnorm::Normalizer;
use crate::tokenizer::{TokenSequence, VocabError, Vocabulary};

pub const MAGIC: &str = "offense-mtl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    encoder: EncoderConfig,
    head: HeadConfig,
    loss_weights: LossWeights,
}

/// Everything needed to run a trained model on raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub model: MtlModel,
    pub loss_weights: LossWeights,
}

impl ModelBundle {
    pub fn encode(&self, normalized: &str) -> TokenSequence {
        self.vocab.encode(normalized, self.model.encoder_config().max_len)
    }

    /// Normalizes and encodes raw texts.
    pub fn encode_raw(&self, normalizer: &Normalizer, texts: &[&str]) -> Vec<TokenSequence> {
        texts.iter().map(|t| self.encode(&normalizer.normalize_text(t))).collect()
    }

    /// Sub-task A predictions from whichever head this bundle was trained with.
    pub fn predict_a(&self, seqs: &[TokenSequence]) -> Result<Vec<TaskPrediction<TaskLabelA>>, ModelError> {
        match self.kind {
            ModelKind::Mtl => Ok(self.model.forward_mtl(seqs)?.into_iter().map(|p| p.a).collect()),
            ModelKind::Baseline => self.model.forward_baseline(seqs),
        }
    }

    /// Full triples; only meaningful for multi-task bundles.
    pub fn predict_triples(&self, seqs: &[TokenSequence]) -> Result<Vec<PredictionTriple>, ModelError> {
        if self.kind != ModelKind::Mtl {
            return Err(ModelError::Mismatch("baseline models only predict sub-task A".into()));
        }
        self.model.forward_mtl(seqs)
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            kind: self.kind,
            encoder: *self.model.encoder_config(),
            head: self.model.head_config,
            loss_weights: self.loss_weights,
        };
        let mut out = format!("{MAGIC} {VERSION}\n");
        let _ = writeln!(out, "@config {}", serde_json::to_string(&header).expect("header serializes"));
        let _ = writeln!(out, "@vocab {}", self.vocab.len());
        out.push_str(&self.vocab.to_lines());
        for t in self.model.tensors() {
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "@param {} {}", t.name, shape.join("x"));
            let values: Vec<String> = t.data.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out.push_str("@end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| CheckpointError::Format { line: 0, reason: format!("truncated before {what}") })
        };
        let fmt = |line: usize, reason: String| CheckpointError::Format { line, reason };

        let (ln, magic) = next("magic line")?;
        let version = magic
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| fmt(ln, "not an offense-mtl checkpoint".into()))?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }

        let (ln, config) = next("@config")?;
        let json = config.strip_prefix("@config ").ok_or_else(|| fmt(ln, "expected @config".into()))?;
        let header: Header = serde_json::from_str(json).map_err(|e| fmt(ln, e.to_string()))?;

        let (ln, vocab_line) = next("@vocab")?;
        let n: usize = vocab_line
            .strip_prefix("@vocab ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| fmt(ln, "expected @vocab <count>".into()))?;
        let mut vocab_text = String::new();
        for _ in 0..n {
            let (_, l) = next("end of vocabulary")?;
            vocab_text.push_str(l);
            vocab_text.push('\n');
        }
        let vocab = Vocabulary::from_lines(&vocab_text)?;

        let mut model = MtlModel::init(header.encoder, header.head, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let mut flat = Vec::with_capacity(model.num_params());
        for (name, shape) in &expected {
            let (ln, decl) = next(name)?;
            let mut parts = decl.split(' ');
            if parts.next() != Some("@param") {
                return Err(fmt(ln, format!("expected @param {name}")));
            }
            let got_name = parts.next().unwrap_or_default();
            let got_shape: Vec<usize> = parts
                .next()
                .unwrap_or_default()
                .split('x')
                .map(|d| d.parse().map_err(|_| fmt(ln, format!("bad shape in {decl:?}"))))
                .collect::<Result<_, _>>()?;
            if got_name != name || &got_shape != shape {
                return Err(fmt(ln, format!("expected {name} {shape:?}, found {got_name} {got_shape:?}")));
            }
            let (ln, values) = next("parameter values")?;
            let before = flat.len();
            for v in values.split(' ').filter(|v| !v.is_empty()) {
                flat.push(v.parse::<f64>().map_err(|_| fmt(ln, format!("bad number {v:?}")))?);
            }
            let count: usize = shape.iter().product();
            if flat.len() - before != count {
                return Err(fmt(ln, format!("{name}: expected {count} values, found {}", flat.len() - before)));
            }
        }
        let (ln, end) = next("@end")?;
        if end != "@end" {
            return Err(fmt(ln, "expected @end".into()));
        }
        model.assign_flat(&flat);
        if vocab.len() != model.encoder_config().vocab_size {
            return Err(CheckpointError::Model(ModelError::Mismatch(format!(
                "vocabulary has {} entries but the encoder expects {}",
                vocab.len(),
                model.encoder_config().vocab_size
            ))));
        }
        Ok(Self { kind: header.kind, vocab, model, loss_weights: header.loss_weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text)
    }
}
