//! Encoder-decoder Transformer with configurable width, depth, and heads.
//!
//! Post-layer-norm residual order, sinusoidal positions, ReLU feed-forward,
//! learned input/output projections, no weight tying. All parameters live
//! in one canonically ordered name->tensor list, so initialization,
//! counting, checkpointing, and gradient bookkeeping all walk the same
//! enumeration.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("sequence of {len} positions exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("batch contains an empty sequence (row {row})")]
    EmptySequence { row: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("parameter set mismatch: {reason}")]
    ParamMismatch { reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn default_layers() -> usize {
    6
}
fn default_heads() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}
fn default_max_len() -> usize {
    128
}

/// Architecture hyper-parameters. `seed` drives parameter initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim_model: usize,
    pub dim_ff: usize,
    #[serde(default = "default_layers")]
    pub n_encoder_layers: usize,
    #[serde(default = "default_layers")]
    pub n_decoder_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Vocabulary sizes may be absent in config files; pipelines fill
    /// them from the vocabulary artifacts before validation.
    #[serde(default)]
    pub src_vocab_size: usize,
    #[serde(default)]
    pub tgt_vocab_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size defaults: 6+6 layers, 8 heads, dropout 0.1, max_len 128.
    pub fn new(dim_model: usize, dim_ff: usize, src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        Self {
            dim_model,
            dim_ff,
            n_encoder_layers: default_layers(),
            n_decoder_layers: default_layers(),
            n_heads: default_heads(),
            dropout_rate: default_dropout(),
            src_vocab_size,
            tgt_vocab_size,
            max_len: default_max_len(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let fail = |reason: String| Err(TransformerError::InvalidConfig { reason });
        let counts = [
            ("dim_model", self.dim_model),
            ("dim_ff", self.dim_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_heads", self.n_heads),
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.dim_model % self.n_heads != 0 {
            return fail(format!(
                "dim_model {} not divisible by n_heads {}",
                self.dim_model, self.n_heads
            ));
        }
        if self.dim_model % 2 != 0 {
            return fail(format!(
                "dim_model {} must be even for sinusoidal positions",
                self.dim_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// The canonical parameter enumeration. Everything that touches the full
/// parameter set (init, counting, checkpoints, optimizer state, gradient
/// collection) iterates this order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.dim_model;
    let ff = config.dim_ff;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("src_embed".into(), vec![config.src_vocab_size, d]),
        ("tgt_embed".into(), vec![config.tgt_vocab_size, d]),
    ];
    let attn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{prefix}.{b}"), vec![d]));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), vec![d]));
        out.push((format!("{prefix}.bias"), vec![d]));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.w1"), vec![d, ff]));
        out.push((format!("{prefix}.b1"), vec![ff]));
        out.push((format!("{prefix}.w2"), vec![ff, d]));
        out.push((format!("{prefix}.b2"), vec![d]));
    };
    for i in 0..config.n_encoder_layers {
        attn(&mut out, &format!("enc{i}.attn"));
        norm(&mut out, &format!("enc{i}.norm1"));
        ffn(&mut out, &format!("enc{i}.ff"));
        norm(&mut out, &format!("enc{i}.norm2"));
    }
    for i in 0..config.n_decoder_layers {
        attn(&mut out, &format!("dec{i}.self_attn"));
        norm(&mut out, &format!("dec{i}.norm1"));
        attn(&mut out, &format!("dec{i}.cross_attn"));
        norm(&mut out, &format!("dec{i}.norm2"));
        ffn(&mut out, &format!("dec{i}.ff"));
        norm(&mut out, &format!("dec{i}.norm3"));
    }
    out.push(("out.w".into(), vec![d, config.tgt_vocab_size]));
    out.push(("out.b".into(), vec![config.tgt_vocab_size]));
    out
}

/// Exact number of scalar parameters implied by a config.
pub fn count_parameters(config: &ModelConfig) -> usize {
    param_shapes(config)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// A configured Transformer plus its parameter tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    params: Vec<(String, Tensor<F>)>,
}

/// Draws a uniform in [0, 1) from the top 53 bits of one `next_u64`.
fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Initializes a model from `config.seed`: rank-2 weights uniform in
/// +-sqrt(6/(fan_in+fan_out)), norm gains one, all other vectors zero.
/// Identical (config, seed) produce bit-identical parameters.
pub fn init_model<F: Scalar>(config: &ModelConfig) -> Result<Model<F>, TransformerError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    for (name, shape) in param_shapes(config) {
        let tensor = if shape.len() == 2 {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let data = (0..shape[0] * shape[1])
                .map(|_| F::from_f64((2.0 * uniform01(&mut rng) - 1.0) * limit))
                .collect();
            Tensor::new(shape, data).expect("shape matches data")
        } else if name.ends_with(".gain") {
            Tensor::full(&shape, F::one())
        } else {
            Tensor::zeros(&shape)
        };
        params.push((name, tensor));
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

impl<F: Scalar> Model<F> {
    /// Rebuilds a model from an explicit parameter list, validating names,
    /// order, and shapes against the canonical enumeration.
    pub fn from_params(
        config: ModelConfig,
        params: Vec<(String, Tensor<F>)>,
    ) -> Result<Self, TransformerError> {
        config.validate()?;
        let expected = param_shapes(&config);
        if params.len() != expected.len() {
            return Err(TransformerError::ParamMismatch {
                reason: format!("expected {} tensors, got {}", expected.len(), params.len()),
            });
        }
        for ((name, tensor), (want_name, want_shape)) in params.iter().zip(&expected) {
            if name != want_name {
                return Err(TransformerError::ParamMismatch {
                    reason: format!("expected tensor {want_name:?}, found {name:?}"),
                });
            }
            if tensor.shape() != want_shape.as_slice() {
                return Err(TransformerError::ParamMismatch {
                    reason: format!(
                        "tensor {name:?} has shape {:?}, expected {want_shape:?}",
                        tensor.shape()
                    ),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[(String, Tensor<F>)] {
        &self.params
    }

    /// Mutable view for optimizer updates; names and shapes must not change.
    pub fn params_mut(&mut self) -> &mut [(String, Tensor<F>)] {
        &mut self.params
    }

    /// Registers every parameter on the tape. Trainable binding uses leaf
    /// nodes (gradients flow); frozen binding uses constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundParams {
        let vars: Vec<(String, Var)> = self
            .params
            .iter()
            .map(|(name, tensor)| {
                let var = if trainable {
                    tape.leaf(tensor.clone())
                } else {
                    tape.constant(tensor.clone())
                };
                (name.clone(), var)
            })
            .collect();
        BoundParams::new(vars)
    }

    /// Eval-mode forward: frozen parameters, no dropout. Pure function of
    /// its inputs; repeated calls produce bit-identical logits.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        src: &Batch,
        tgt_in: &Batch,
    ) -> Result<Var, TransformerError> {
        let bound = self.bind(tape, false);
        self.forward_with(tape, &bound, src, tgt_in, None)
    }

    /// Forward pass over already-bound parameters. Passing a dropout RNG
    /// switches on training mode (inverted dropout after the embedding sum
    /// and after each sublayer, before its residual add).
    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        src: &Batch,
        tgt_in: &Batch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, TransformerError> {
        let config = &self.config;
        for batch in [src, tgt_in] {
            if batch.cols() > config.max_len {
                return Err(TransformerError::SequenceTooLong {
                    len: batch.cols(),
                    max_len: config.max_len,
                });
            }
        }
        let heads = config.n_heads;
        let rate = config.dropout_rate;

        let src_pad: Var = tape.constant(pad_mask::<F>(src));
        let causal: Var = tape.constant(causal_mask::<F>(tgt_in.cols()));

        // Encoder.
        let mut x = embed_input(tape, bound.var("src_embed"), src, config)?;
        x = apply_dropout(tape, x, rate, dropout.as_deref_mut())?;
        for i in 0..config.n_encoder_layers {
            let attn = bound.attention(&format!("enc{i}.attn"));
            let a = multi_head_attention(tape, &attn, x, x, x, Some(src_pad), heads)?;
            let a = apply_dropout(tape, a, rate, dropout.as_deref_mut())?;
            x = residual_norm(tape, bound, x, a, &format!("enc{i}.norm1"))?;
            let f = feed_forward(tape, bound, x, &format!("enc{i}.ff"))?;
            let f = apply_dropout(tape, f, rate, dropout.as_deref_mut())?;
            x = residual_norm(tape, bound, x, f, &format!("enc{i}.norm2"))?;
        }
        let memory = x;

        // Decoder.
        let mut y = embed_input(tape, bound.var("tgt_embed"), tgt_in, config)?;
        y = apply_dropout(tape, y, rate, dropout.as_deref_mut())?;
        for i in 0..config.n_decoder_layers {
            let self_attn = bound.attention(&format!("dec{i}.self_attn"));
            let a = multi_head_attention(tape, &self_attn, y, y, y, Some(causal), heads)?;
            let a = apply_dropout(tape, a, rate, dropout.as_deref_mut())?;
            y = residual_norm(tape, bound, y, a, &format!("dec{i}.norm1"))?;

            let cross = bound.attention(&format!("dec{i}.cross_attn"));
            let c = multi_head_attention(tape, &cross, y, memory, memory, Some(src_pad), heads)?;
            let c = apply_dropout(tape, c, rate, dropout.as_deref_mut())?;
            y = residual_norm(tape, bound, y, c, &format!("dec{i}.norm2"))?;

            let f = feed_forward(tape, bound, y, &format!("dec{i}.ff"))?;
            let f = apply_dropout(tape, f, rate, dropout.as_deref_mut())?;
            y = residual_norm(tape, bound, y, f, &format!("dec{i}.norm3"))?;
        }

        let logits = tape.matmul(y, bound.var("out.w"))?;
        let logits = tape.add(logits, bound.var("out.b"))?;
        debug_assert_eq!(
            tape.value(logits).shape(),
            &[src.rows(), tgt_in.cols(), config.tgt_vocab_size][..]
        );
        Ok(logits)
    }
}

/// Parameter vars registered on a tape, addressable by canonical name.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl BoundParams {
    fn new(vars: Vec<(String, Var)>) -> Self {
        let by_name = vars.iter().map(|(n, v)| (n.clone(), *v)).collect();
        Self { vars, by_name }
    }

    /// Builds a binding from externally created vars paired with the
    /// canonical enumeration of `config` (used by gradient checks).
    pub fn from_ordered_vars(config: &ModelConfig, vars: &[Var]) -> Self {
        let names = param_shapes(config);
        assert_eq!(names.len(), vars.len(), "var count must match enumeration");
        Self::new(
            names
                .into_iter()
                .zip(vars)
                .map(|((name, _), &v)| (name, v))
                .collect(),
        )
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Panics on an unknown name: parameter names are internal and fixed.
    pub fn var(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    fn attention(&self, prefix: &str) -> AttentionParams {
        AttentionParams {
            wq: self.var(&format!("{prefix}.wq")),
            wk: self.var(&format!("{prefix}.wk")),
            wv: self.var(&format!("{prefix}.wv")),
            wo: self.var(&format!("{prefix}.wo")),
            bq: self.var(&format!("{prefix}.bq")),
            bk: self.var(&format!("{prefix}.bk")),
            bv: self.var(&format!("{prefix}.bv")),
            bo: self.var(&format!("{prefix}.bo")),
        }
    }
}

/// Projection weights of one attention sublayer.
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
}

/// A rectangular id batch with per-row true lengths; pad fills each row's
/// suffix. Pad masks are derived from the lengths, never from the ids, so
/// the content of pad positions cannot influence unmasked positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    ids: Vec<usize>,
    rows: usize,
    cols: usize,
    lengths: Vec<usize>,
}

impl Batch {
    pub fn new(sequences: &[Vec<usize>], pad_id: usize) -> Result<Self, TransformerError> {
        if sequences.is_empty() {
            return Err(TransformerError::EmptyBatch);
        }
        let mut cols = 0;
        for (row, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(TransformerError::EmptySequence { row });
            }
            cols = cols.max(seq.len());
        }
        let rows = sequences.len();
        let mut ids = Vec::with_capacity(rows * cols);
        let mut lengths = Vec::with_capacity(rows);
        for seq in sequences {
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat(pad_id).take(cols - seq.len()));
            lengths.push(seq.len());
        }
        Ok(Self {
            ids,
            rows,
            cols,
            lengths,
        })
    }

    /// Overrides the ids at pad positions without touching lengths; only
    /// meaningful in mask tests, hence the explicit name.
    pub fn with_pad_ids_replaced(mut self, replacement: usize) -> Self {
        for r in 0..self.rows {
            for c in self.lengths[r]..self.cols {
                self.ids[r * self.cols + c] = replacement;
            }
        }
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }
}

/// Additive mask `[rows, 1, 1, cols]`: 0 on real positions, -inf on pad.
pub fn pad_mask<F: Scalar>(batch: &Batch) -> Tensor<F> {
    let mut data = vec![F::zero(); batch.rows() * batch.cols()];
    for r in 0..batch.rows() {
        for c in batch.lengths()[r]..batch.cols() {
            data[r * batch.cols() + c] = F::neg_infinity();
        }
    }
    Tensor::new(vec![batch.rows(), 1, 1, batch.cols()], data).expect("shape matches")
}

/// Additive mask `[1, 1, len, len]`: -inf strictly above the diagonal, so
/// position i attends only to positions <= i.
pub fn causal_mask<F: Scalar>(len: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = F::neg_infinity();
        }
    }
    Tensor::new(vec![1, 1, len, len], data).expect("shape matches")
}

/// Sinusoidal positions: entry(pos, 2i) = sin(pos/10000^(2i/d)),
/// entry(pos, 2i+1) = cos of the same angle. Requires even `dim_model`.
pub fn positional_encoding<F: Scalar>(
    max_len: usize,
    dim_model: usize,
) -> Result<Tensor<F>, TransformerError> {
    if dim_model % 2 != 0 {
        return Err(TransformerError::InvalidConfig {
            reason: format!("dim_model {dim_model} must be even for sinusoidal positions"),
        });
    }
    let mut data = Vec::with_capacity(max_len * dim_model);
    for pos in 0..max_len {
        for i in 0..dim_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim_model as f64);
            data.push(F::from_f64(angle.sin()));
            data.push(F::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![max_len, dim_model], data).map_err(Into::into)
}

fn embed_input<F: Scalar>(
    tape: &mut Tape<F>,
    table: Var,
    batch: &Batch,
    config: &ModelConfig,
) -> Result<Var, TransformerError> {
    let e = tape.embedding(table, batch.ids(), &[batch.rows(), batch.cols()])?;
    let scaled = tape.scale(e, (config.dim_model as f64).sqrt());
    let pe = positional_encoding::<F>(batch.cols(), config.dim_model)?;
    let pe = tape.constant(pe);
    Ok(tape.add(scaled, pe)?)
}

fn residual_norm<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    x: Var,
    sublayer: Var,
    norm_prefix: &str,
) -> Result<Var, TransformerError> {
    let sum = tape.add(x, sublayer)?;
    let gain = bound.var(&format!("{norm_prefix}.gain"));
    let bias = bound.var(&format!("{norm_prefix}.bias"));
    Ok(tape.layer_norm(sum, gain, bias, 1e-5)?)
}

fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    x: Var,
    prefix: &str,
) -> Result<Var, TransformerError> {
    let h = tape.matmul(x, bound.var(&format!("{prefix}.w1")))?;
    let h = tape.add(h, bound.var(&format!("{prefix}.b1")))?;
    let h = tape.relu(h);
    let out = tape.matmul(h, bound.var(&format!("{prefix}.w2")))?;
    Ok(tape.add(out, bound.var(&format!("{prefix}.b2")))?)
}

/// Inverted dropout: keep with probability 1-rate and scale kept values by
/// 1/(1-rate). No-op when `rng` is absent (eval mode) or rate is 0.
fn apply_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, TransformerError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep_scale = F::from_f64(1.0 / (1.0 - rate));
    let data: Vec<F> = (0..shape.iter().product::<usize>())
        .map(|_| {
            if uniform01(rng) < rate {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data).expect("shape matches"));
    Ok(tape.mul(x, mask)?)
}

/// Full attention sublayer: project `query`/`key`/`value` through
/// Wq/Wk/Wv, split into `n_heads` heads of width dim_model/n_heads, score
/// with QK^T / sqrt(head_dim), add the additive `mask` (0 or -inf) before
/// softmax, weight V, concatenate heads, and project through Wo.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    params: &AttentionParams,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<Var>,
    n_heads: usize,
) -> Result<Var, TransformerError> {
    let q_shape = tape.value(query).shape().to_vec();
    if q_shape.len() != 3 {
        return Err(TransformerError::ParamMismatch {
            reason: format!("attention expects [batch, len, dim] input, got {q_shape:?}"),
        });
    }
    let (b, tq, d) = (q_shape[0], q_shape[1], q_shape[2]);
    let tk = tape.value(key).shape()[1];
    if d % n_heads != 0 {
        return Err(TransformerError::InvalidConfig {
            reason: format!("dim {d} not divisible by {n_heads} heads"),
        });
    }
    let dh = d / n_heads;

    let project = |tape: &mut Tape<F>, x: Var, w: Var, bias: Var, t: usize| {
        let p = tape.matmul(x, w)?;
        let p = tape.add(p, bias)?;
        let p = tape.reshape(p, &[b, t, n_heads, dh])?;
        tape.permute(p, &[0, 2, 1, 3]) // [B, H, T, dh]
    };
    let q = project(tape, query, params.wq, params.bq, tq)?;
    let k = project(tape, key, params.wk, params.bk, tk)?;
    let v = project(tape, value, params.wv, params.bv, tk)?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = mask {
        scores = tape.add(scores, mask)?;
    }
    let attn = tape.softmax(scores, 3)?;

    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, tq, d])?;
    let out = tape.matmul(ctx, params.wo)?;
    Ok(tape.add(out, params.bo)?)
}
