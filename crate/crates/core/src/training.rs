//! Cross-entropy training with Adam, early stopping on validation loss,
//! and best-model selection by validation BLEU.
//!
//! The two signals are split on purpose: validation loss is cheap and
//! watched every epoch for stopping; BLEU is expensive and sampled every
//! `eval_every` epochs to pick the returned checkpoint.

use std::io::{self, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{self, EvaluateError};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};
use crate::transformer::{param_shapes, Batch, Model, TransformerError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CHECKPOINT_MAGIC: &[u8; 8] = b"LGNMT001";

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid train config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{which} set is empty")]
    EmptyDataset { which: &'static str },
    #[error("every position in the batch is padding")]
    AllPositionsPad,
    #[error("non-finite gradient for parameter {name:?}")]
    NonFiniteGradient { name: String },
    #[error("gradient for {name:?} has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Box<TrainHistory>,
    },
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("checkpoint header unreadable: {message}")]
    HeaderParse { message: String },
    #[error("checkpoint directory inconsistent: {reason}")]
    DirectoryMismatch { reason: String },
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn default_learning_rate() -> f64 {
    3e-4
}
fn default_patience() -> usize {
    5
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global-norm clipping threshold; no clipping when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(batch_size: usize, max_epochs: usize) -> Self {
        Self {
            batch_size,
            learning_rate: default_learning_rate(),
            max_epochs,
            patience: default_patience(),
            min_delta: default_min_delta(),
            eval_every: default_eval_every(),
            seed: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |reason: String| Err(TrainingError::InvalidConfig { reason });
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.patience < 1 {
            return fail("patience must be >= 1".into());
        }
        if self.eval_every < 1 {
            return fail("eval_every must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.min_delta >= 0.0) {
            return fail(format!("min_delta {} must be >= 0", self.min_delta));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return fail(format!("grad_clip {clip} must be positive"));
            }
        }
        Ok(())
    }
}

/// One id-encoded sentence pair, without bos/eos; the trainer adds them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Mean negative log-likelihood of `targets` under `logits` over non-pad
/// positions. `logits` is `[batch, len, vocab]`, `targets` row-major
/// `[batch, len]`. Pad positions are excluded from both sum and count.
pub fn cross_entropy_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
    pad_id: usize,
) -> Result<Var, TrainingError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 3 {
        return Err(NumericsError::RankTooLow {
            context: "cross_entropy_loss",
            rank: shape.len(),
            min: 3,
        }
        .into());
    }
    let (rows, vocab) = (shape[0] * shape[1], shape[2]);
    let flat = tape.reshape(logits, &[rows, vocab])?;
    let valid: Vec<bool> = targets.iter().map(|&t| t != pad_id).collect();
    tape.cross_entropy(flat, targets, &valid).map_err(|e| match e {
        NumericsError::NoValidTargets => TrainingError::AllPositionsPad,
        other => other.into(),
    })
}

/// Adam moments, aligned index-for-index with the model's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[(String, Tensor<F>)]) -> Self {
        Self {
            m: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update. Gradients are validated (count, shapes, finiteness)
/// before any parameter or moment is touched; moment math runs in f64.
pub fn adam_step<F: Scalar>(
    params: &mut [(String, Tensor<F>)],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), TrainingError> {
    if grads.len() != params.len() {
        return Err(TrainingError::GradientCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for ((name, param), grad) in params.iter().zip(grads) {
        if grad.shape() != param.shape() {
            return Err(TrainingError::GradientShape {
                name: name.clone(),
                expected: param.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(TrainingError::NonFiniteGradient { name: name.clone() });
        }
    }

    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, ((_, param), grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j].as_f64();
            let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * g;
            let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * g * g;
            m[j] = F::from_f64(mj);
            v[j] = F::from_f64(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            p[j] = F::from_f64(p[j].as_f64() - update);
        }
    }
    Ok(())
}

/// Scales all gradients by threshold/norm when the global L2 norm
/// exceeds the threshold.
fn clip_gradients<F: Scalar>(grads: &mut [Tensor<F>], threshold: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = F::from_f64(v.as_f64() * scale);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_bleu: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Epoch with the highest validation BLEU among evaluated epochs.
    pub best_epoch: Option<usize>,
}

/// One JSON object per epoch, in training order.
pub fn write_history_jsonl<W: Write>(
    history: &TrainHistory,
    mut writer: W,
) -> Result<(), TrainingError> {
    for record in &history.records {
        let line = serde_json::to_string(record)
            .map_err(|e| TrainingError::HeaderParse { message: e.to_string() })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Validation-loss patience rule: stop after `patience` consecutive
/// epochs that fail to beat the best loss by more than `min_delta`.
struct EarlyStopping {
    best: f64,
    streak: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStopping {
    fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            best: f64::INFINITY,
            streak: 0,
            patience,
            min_delta,
        }
    }

    /// Returns true when training should stop after this observation.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.streak = 0;
            false
        } else {
            self.streak += 1;
            self.streak >= self.patience
        }
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Builds the teacher-forcing views of a chunk of pairs: source batch,
/// decoder input batch (bos followed by the target), and flattened label
/// ids (target followed by eos, padded to the batch maximum).
pub fn teacher_forcing_batch(
    pairs: &[&EncodedPair],
) -> Result<(Batch, Batch, Vec<usize>), TrainingError> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let mut dec_in = Vec::with_capacity(pairs.len());
    let mut labels_rows: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut row = Vec::with_capacity(pair.tgt.len() + 1);
        row.push(BOS_ID);
        row.extend_from_slice(&pair.tgt);
        dec_in.push(row);
        let mut labels = pair.tgt.clone();
        labels.push(EOS_ID);
        labels_rows.push(labels);
    }
    let src = Batch::new(&srcs, PAD_ID)?;
    let tgt_in = Batch::new(&dec_in, PAD_ID)?;
    let cols = tgt_in.cols();
    let mut labels = Vec::with_capacity(pairs.len() * cols);
    for row in &labels_rows {
        labels.extend_from_slice(row);
        labels.extend(std::iter::repeat(PAD_ID).take(cols - row.len()));
    }
    Ok((src, tgt_in, labels))
}

/// Token-weighted mean loss over `pairs` in eval mode (no dropout, no
/// gradients).
fn dataset_loss<F: Scalar>(
    model: &Model<F>,
    pairs: &[EncodedPair],
    batch_size: usize,
) -> Result<f64, TrainingError> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for chunk in pairs.chunks(batch_size) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let (src, tgt_in, labels) = teacher_forcing_batch(&refs)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &src, &tgt_in)?;
        let loss = cross_entropy_loss(&mut tape, logits, &labels, PAD_ID)?;
        let tokens = labels.iter().filter(|&&t| t != PAD_ID).count();
        total_nll += tape.value(loss).data()[0].as_f64() * tokens as f64;
        total_tokens += tokens;
    }
    Ok(total_nll / total_tokens as f64)
}

/// Corpus BLEU of greedy decodes against reference ids, the trainer's
/// internal model-selection signal (subword-id level; word-level BLEU
/// belongs to evaluation proper).
fn validation_bleu<F: Scalar>(
    model: &Model<F>,
    pairs: &[EncodedPair],
) -> Result<f64, TrainingError> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        hyps.push(evaluate::greedy_decode(model, &pair.src, model.config.max_len)?);
        refs.push(pair.tgt.clone());
    }
    Ok(evaluate::bleu_corpus(&hyps, &refs)?.bleu)
}

/// Trains `model` and returns the checkpoint with the highest validation
/// BLEU plus the epoch-by-epoch history. Deterministic given (data,
/// config): one seeded RNG drives shuffling and dropout in a fixed draw
/// order.
pub fn train<F: Scalar>(
    mut model: Model<F>,
    train_pairs: &[EncodedPair],
    valid_pairs: &[EncodedPair],
    config: &TrainConfig,
) -> Result<(Model<F>, TrainHistory), TrainingError> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(TrainingError::EmptyDataset { which: "train" });
    }
    if valid_pairs.is_empty() {
        return Err(TrainingError::EmptyDataset { which: "valid" });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut best_bleu = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<(String, Tensor<F>)>> = None;
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        shuffle(&mut order, &mut rng);

        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&EncodedPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (src, tgt_in, labels) = teacher_forcing_batch(&refs)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model.forward_with(&mut tape, &bound, &src, &tgt_in, Some(&mut rng))?;
            let loss = cross_entropy_loss(&mut tape, logits, &labels, PAD_ID)?;
            let loss_value = tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(TrainingError::Diverged {
                    epoch,
                    history: Box::new(history),
                });
            }
            let tokens = labels.iter().filter(|&&t| t != PAD_ID).count();
            epoch_nll += loss_value * tokens as f64;
            epoch_tokens += tokens;

            let grad_table = tape.backward(loss)?;
            let mut grads: Vec<Tensor<F>> = bound
                .vars()
                .iter()
                .map(|(_, var)| grad_table.get(*var).expect("leaf gradient").clone())
                .collect();
            if let Some(threshold) = config.grad_clip {
                clip_gradients(&mut grads, threshold);
            }
            adam_step(model.params_mut(), &grads, &mut state, config.learning_rate)?;
        }
        let train_loss = epoch_nll / epoch_tokens as f64;

        let valid_loss = dataset_loss(&model, valid_pairs, config.batch_size)?;
        if !valid_loss.is_finite() {
            return Err(TrainingError::Diverged {
                epoch,
                history: Box::new(history),
            });
        }
        let valid_bleu = if epoch % config.eval_every == 0 {
            Some(validation_bleu(&model, valid_pairs)?)
        } else {
            None
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_bleu,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(bleu) = valid_bleu {
            if bleu > best_bleu {
                best_bleu = bleu;
                best_params = Some(model.params().to_vec());
                history.best_epoch = Some(epoch);
            }
        }
        if stopper.observe(valid_loss) {
            history.stopped_early = true;
            break;
        }
    }

    if let Some(params) = best_params {
        model = Model::from_params(model.config.clone(), params)?;
    }
    Ok((model, history))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: crate::transformer::ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes magic, a little-endian u32 header length, a JSON header with
/// the config and tensor directory, then raw little-endian f32 data in
/// directory order.
pub fn save_checkpoint<W: Write>(model: &Model<f32>, mut writer: W) -> Result<(), TrainingError> {
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for (name, tensor) in model.params() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * tensor.numel() as u64;
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| TrainingError::HeaderParse { message: e.to_string() })?;
    writer.write_all(CHECKPOINT_MAGIC)?;
    writer.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    writer.write_all(&header_bytes)?;
    for (_, tensor) in model.params() {
        let mut bytes = Vec::with_capacity(4 * tensor.numel());
        for value in tensor.data() {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        writer.write_all(&bytes)?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut reader: R) -> Result<Model<f32>, TrainingError> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut reader, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainingError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_or(&mut reader, &mut len_bytes, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or(&mut reader, &mut header_bytes, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| TrainingError::HeaderParse { message: e.to_string() })?;

    let expected = param_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(TrainingError::DirectoryMismatch {
            reason: format!(
                "directory lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            ),
        });
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(TrainingError::DirectoryMismatch {
                reason: format!(
                    "directory entry {:?} {:?} does not match expected {:?} {:?}",
                    entry.name, entry.shape, name, shape
                ),
            });
        }
        if entry.dtype != "f32" {
            return Err(TrainingError::DirectoryMismatch {
                reason: format!("tensor {:?} has dtype {:?}", entry.name, entry.dtype),
            });
        }
        if entry.offset != offset {
            return Err(TrainingError::DirectoryMismatch {
                reason: format!(
                    "tensor {:?} at offset {}, expected {offset}",
                    entry.name, entry.offset
                ),
            });
        }
        offset += 4 * shape.iter().product::<usize>() as u64;
    }

    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact_or(&mut reader, &mut bytes, "tensor data")?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(TrainingError::Numerics)?;
        params.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(TrainingError::DirectoryMismatch {
            reason: "trailing bytes after last tensor".into(),
        });
    }
    Model::from_params(header.config, params).map_err(Into::into)
}

fn read_exact_or<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    context: &'static str,
) -> Result<(), TrainingError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TrainingError::Truncated { context }
        } else {
            TrainingError::Io(e)
        }
    })
}

pub fn save_checkpoint_file<P: AsRef<Path>>(
    model: &Model<f32>,
    path: P,
) -> Result<(), TrainingError> {
    let file = std::fs::File::create(path)?;
    save_checkpoint(model, io::BufWriter::new(file))
}

pub fn load_checkpoint_file<P: AsRef<Path>>(path: P) -> Result<Model<f32>, TrainingError> {
    let file = std::fs::File::open(path)?;
    load_checkpoint(io::BufReader::new(file))
}
