//! Greedy autoregressive decoding and corpus-level BLEU.
//!
//! The BLEU variant is pinned: corpus-level pooling of per-sentence
//! clipped n-gram counts, n = 1..4 with uniform weights, single
//! reference, case-sensitive whitespace tokens, no smoothing (a zero
//! precision zeroes the score). Hypotheses are scored on word tokens
//! recovered by undoing the subword segmentation, not on detokenized
//! text.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::{self, Write};

use crate::corpus::SentencePair;
use crate::numerics::{Scalar, Tape};
use crate::subword::{self, BpeModel, SubwordError, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::transformer::{Batch, Model, TransformerError};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("{side} vocabulary has {vocab} entries but the model expects {model}")]
    VocabModelMismatch {
        side: &'static str,
        vocab: usize,
        model: usize,
    },
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Corpus BLEU with its component statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuResult {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_length: usize,
    pub ref_length: usize,
}

impl BleuResult {
    /// Fixed 6-decimal JSON rendering, stable across platforms.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"bleu\": {:.6}, \"p1\": {:.6}, \"p2\": {:.6}, \"p3\": {:.6}, \"p4\": {:.6}, \"bp\": {:.6}, \"hyp_len\": {}, \"ref_len\": {}}}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_length,
            self.ref_length
        )
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts: HashMap<&[T], u64> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU over token sequences. Generic over the token type so
/// id sequences and word tokens score through the same code path.
pub fn bleu_corpus<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<BleuResult, EvaluateError> {
    if hypotheses.len() != references.len() {
        return Err(EvaluateError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvaluateError::EmptyCorpus);
    }

    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_length = 0usize;
    let mut ref_length = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_length += hyp.len();
        ref_length += reference.len();
        for n in 1..=4 {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
        }
    }

    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if hyp_length == 0 {
        0.0
    } else if hyp_length < ref_length {
        (1.0 - ref_length as f64 / hyp_length as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) || hyp_length == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuResult {
        bleu,
        precisions,
        brevity_penalty,
        hyp_length,
        ref_length,
    })
}

/// Tokenizes both sides with the corpus tokenizer and scores BLEU; the
/// path behind `eval` on plain-text files.
pub fn bleu_on_texts<S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
) -> Result<BleuResult, EvaluateError> {
    let hyp_tokens: Vec<Vec<String>> = hypotheses
        .iter()
        .map(|s| subword::tokenize(s.as_ref()))
        .collect();
    let ref_tokens: Vec<Vec<String>> = references
        .iter()
        .map(|s| subword::tokenize(s.as_ref()))
        .collect();
    bleu_corpus(&hyp_tokens, &ref_tokens)
}

/// Greedy decode: start from bos, take the argmax of the next-token
/// logits (ties break to the lowest id), stop at eos or after emitting
/// `max_len` ids. Returns generated ids with bos/eos stripped. Each step
/// re-runs a full-prefix forward, which keeps decoding trivially
/// consistent with training-time logits.
pub fn greedy_decode<F: Scalar>(
    model: &Model<F>,
    src_ids: &[usize],
    max_len: usize,
) -> Result<Vec<usize>, EvaluateError> {
    let src = Batch::new(&[src_ids.to_vec()], PAD_ID)?;
    // Decoder input holds bos plus the emitted ids, so emission must stop
    // one short of the model's positional capacity.
    let cap = max_len.min(model.config.max_len - 1);
    let mut generated: Vec<usize> = Vec::new();
    loop {
        let mut dec_in = Vec::with_capacity(generated.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(&generated);
        let tgt = Batch::new(&[dec_in], PAD_ID)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &src, &tgt)?;
        let values = tape.value(logits);
        let vocab = values.shape()[2];
        let last = &values.data()[(tgt.cols() - 1) * vocab..tgt.cols() * vocab];
        let mut best = 0usize;
        for (id, value) in last.iter().enumerate() {
            if *value > last[best] {
                best = id;
            }
        }
        if best == EOS_ID {
            break;
        }
        generated.push(best);
        if generated.len() >= cap {
            break;
        }
    }
    Ok(generated)
}

/// One line of the side-by-side translations file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationRow {
    pub src: String,
    pub reference: String,
    pub hypothesis: String,
}

/// BLEU plus the decoded sentences it was computed from.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub bleu: BleuResult,
    pub rows: Vec<TranslationRow>,
}

/// Decodes every source sentence of `pairs` and scores corpus BLEU on
/// word tokens (subword segmentation undone, no detokenization). The
/// hypothesis column of the rows carries the same tokenized form joined
/// with single spaces.
pub fn evaluate_model<F: Scalar>(
    model: &Model<F>,
    pairs: &[SentencePair],
    src_bpe: &BpeModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<EvalOutput, EvaluateError> {
    if src_vocab.len() != model.config.src_vocab_size {
        return Err(EvaluateError::VocabModelMismatch {
            side: "source",
            vocab: src_vocab.len(),
            model: model.config.src_vocab_size,
        });
    }
    if tgt_vocab.len() != model.config.tgt_vocab_size {
        return Err(EvaluateError::VocabModelMismatch {
            side: "target",
            vocab: tgt_vocab.len(),
            model: model.config.tgt_vocab_size,
        });
    }
    if pairs.is_empty() {
        return Err(EvaluateError::EmptyCorpus);
    }
    let mut hyp_tokens: Vec<Vec<String>> = Vec::with_capacity(pairs.len());
    let mut ref_tokens: Vec<Vec<String>> = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let src_ids = subword::encode_ids(src_vocab, src_bpe, &pair.src);
        let hyp = if src_ids.is_empty() {
            Vec::new()
        } else {
            let ids = greedy_decode(model, &src_ids, max_len)?;
            subword::decode_ids_to_tokens(tgt_vocab, &ids)?
        };
        rows.push(TranslationRow {
            src: pair.src.clone(),
            reference: pair.tgt.clone(),
            hypothesis: hyp.join(" "),
        });
        hyp_tokens.push(hyp);
        ref_tokens.push(subword::tokenize(&pair.tgt));
    }
    let bleu = bleu_corpus(&hyp_tokens, &ref_tokens)?;
    Ok(EvalOutput { bleu, rows })
}

fn sanitize_tsv(text: &str) -> String {
    text.replace(['\t', '\n', '\r'], " ")
}

/// Writes src/ref/hyp columns as UTF-8 TSV, one sentence per line. Tabs
/// and newlines inside any field become single spaces.
pub fn write_translations_tsv<W: Write>(
    rows: &[TranslationRow],
    mut writer: W,
) -> Result<(), EvaluateError> {
    for row in rows {
        writeln!(
            writer,
            "{}\t{}\t{}",
            sanitize_tsv(&row.src),
            sanitize_tsv(&row.reference),
            sanitize_tsv(&row.hypothesis)
        )?;
    }
    Ok(())
}
