//! End-to-end workbench for low-resource neural machine translation,
//! built around a Luganda-English pipeline.
//!
//! The crate is organized along the pipeline:
//!
//! - [`corpus`]: parsing, merging, cleaning, and seeded splitting of
//!   parallel corpora, plus the JSONL interchange format.
//! - [`subword`]: whitespace-and-punctuation tokenization and byte-pair
//!   encoding with an end-of-word marker, vocabularies, and id codecs.
//! - [`numerics`]: dense tensors, batched matmul, and reverse-mode
//!   automatic differentiation on an append-only tape, with a
//!   finite-difference gradient checker.
//! - [`transformer`]: the encoder-decoder translation model.
//! - [`training`]: Adam, early stopping, BLEU-based model selection,
//!   and checkpoint serialization.
//! - [`evaluate`]: greedy decoding and corpus BLEU.
//! - [`sweep`]: Bayesian hyper-parameter search over the power-of-two
//!   grid with GP surrogate plus correlation/importance reports.

pub mod corpus;
pub mod evaluate;
pub mod numerics;
pub mod subword;
pub mod sweep;
pub mod training;
pub mod transformer;

pub use corpus::{CleanReport, Corpus, Direction, Origin, SentencePair, SplitSpec};
pub use evaluate::{BleuResult, EvalOutput};
pub use numerics::{Scalar, Tape, Tensor, Var};
pub use subword::{BpeModel, Vocabulary};
pub use sweep::{SearchSpace, SweepHistory, TrialConfig};
pub use training::{EncodedPair, TrainConfig, TrainHistory};
pub use transformer::{Batch, Model, ModelConfig};
