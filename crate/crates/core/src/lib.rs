//! Hierarchical multi-task offensive-language classification.
//!
//! The crate covers the whole pipeline for OLID/SOLID-style data:
//!
//! - [`textnorm`]: tweet normalization (lowercasing, emoji names, hashtag
//!   segmentation, mention collapsing, rare-word substitution).
//! - [`corpus`]: the three-level label hierarchy and TSV loaders.
//! - [`tokenizer`]: whitespace vocabulary and fixed-length encoding.
//! - [`encoder`]: a small transformer encoder with hand-written backprop.
//! - [`mtl`]: shared encoder + one LSTM head per sub-task, the linear
//!   baseline head, and the weighted multi-task loss.
//! - [`training`]: Adam, early stopping, regression pre-training and
//!   finite-difference gradient checks.
//! - [`evaluation`]: macro-F1, reports, majority-vote ensembles and
//!   threshold search.
//! - [`checkpoint`]: the versioned model container.
//! - [`synthetic`]: seeded generators for small hierarchical corpora.
//! - [`cli`]: the `offense-mtl` command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod mtl;
pub mod params;
pub mod synthetic;
pub mod textnorm;
pub mod tokenizer;
pub mod training;

pub use checkpoint::ModelBundle;
pub use corpus::{LabelTriple, LabeledExample, ScoredExample, TaskLabelA, TaskLabelB, TaskLabelC};
pub use encoder::{Encoder, EncoderConfig};
pub use mtl::{LossWeights, ModelKind, MtlModel, PredictionTriple};
pub use textnorm::{NormalizedTweet, Normalizer, RawTweet};
pub use tokenizer::{TokenSequence, Vocabulary};
