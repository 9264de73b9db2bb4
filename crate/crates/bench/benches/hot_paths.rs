//! Hot-path benchmarks: subword encoding, BLEU scoring, transformer
//! forward/backward, optimizer step, and sweep suggestion.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lugnmt_core::evaluate::bleu_corpus;
use lugnmt_core::subword::{bpe_encode, learn_bpe, word_frequencies, PAD_ID};
use lugnmt_core::sweep::{suggest_next, SearchSpace, SweepHistory, TrialRecord, TrialStatus};
use lugnmt_core::training::{adam_step, cross_entropy_loss, teacher_forcing_batch, AdamState};
use lugnmt_core::training::EncodedPair;
use lugnmt_core::transformer::{init_model, Batch, Model, ModelConfig};
use lugnmt_core::Tape;
use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

fn synthetic_sentences(n: usize, seed: u64) -> Vec<String> {
    let syllables = ["ka", "ba", "mu", "ki", "bi", "lu", "gu", "ta", "se", "nya"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words = 4 + (rng.next_u64() % 8) as usize;
            (0..words)
                .map(|_| {
                    let len = 2 + (rng.next_u64() % 3) as usize;
                    (0..len)
                        .map(|_| syllables[(rng.next_u64() % 10) as usize])
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn bench_bpe(c: &mut Criterion) {
    let sentences = synthetic_sentences(2_000, 1);
    let freqs = word_frequencies(sentences.iter().map(|s| s.as_str()));
    let model = learn_bpe(&freqs, 200);
    let words: Vec<&String> = freqs.keys().collect();

    c.bench_function("bpe_learn_200_merges", |b| {
        b.iter(|| learn_bpe(black_box(&freqs), 200))
    });
    c.bench_function("bpe_encode_vocabulary", |b| {
        b.iter(|| {
            for word in &words {
                black_box(bpe_encode(&model, word));
            }
        })
    });
}

fn bench_bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sample = || -> Vec<u32> {
        let len = 5 + (rng.next_u64() % 20) as usize;
        (0..len).map(|_| (rng.next_u64() % 500) as u32).collect()
    };
    let hyps: Vec<Vec<u32>> = (0..1_000).map(|_| sample()).collect();
    let refs: Vec<Vec<u32>> = (0..1_000).map(|_| sample()).collect();
    c.bench_function("bleu_corpus_1000", |b| {
        b.iter(|| bleu_corpus(black_box(&hyps), black_box(&refs)).unwrap())
    });
}

fn bench_model() -> (Model<f32>, Batch, Batch, Vec<usize>) {
    let config = ModelConfig {
        dim_model: 64,
        dim_ff: 128,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        n_heads: 4,
        dropout_rate: 0.0,
        src_vocab_size: 64,
        tgt_vocab_size: 64,
        max_len: 24,
        seed: 3,
    };
    let model = init_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<EncodedPair> = (0..8)
        .map(|_| {
            let len = 8 + (rng.next_u64() % 9) as usize;
            let ids: Vec<usize> = (0..len).map(|_| 4 + (rng.next_u64() % 60) as usize).collect();
            EncodedPair { src: ids.clone(), tgt: ids }
        })
        .collect();
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    let (src, tgt_in, labels) = teacher_forcing_batch(&refs).unwrap();
    (model, src, tgt_in, labels)
}

fn bench_transformer(c: &mut Criterion) {
    let (model, src, tgt_in, labels) = bench_model();

    c.bench_function("transformer_forward_b8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            black_box(model.forward(&mut tape, &src, &tgt_in).unwrap());
        })
    });

    c.bench_function("transformer_train_step_b8", |b| {
        let mut model = model.clone();
        let mut state = AdamState::new(model.params());
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let logits = model
                .forward_with(&mut tape, &bound, &src, &tgt_in, None)
                .unwrap();
            let loss = cross_entropy_loss(&mut tape, logits, &labels, PAD_ID).unwrap();
            let table = tape.backward(loss).unwrap();
            let grads: Vec<_> = bound
                .vars()
                .iter()
                .map(|(_, v)| table.get(*v).unwrap().clone())
                .collect();
            adam_step(model.params_mut(), &grads, &mut state, 1e-3).unwrap();
        })
    });
}

fn bench_sweep(c: &mut Criterion) {
    let space = SearchSpace::default();
    let grid = space.grid();
    let records: Vec<TrialRecord> = (0..20)
        .map(|index| TrialRecord {
            index,
            config: grid[(index * 17) % grid.len()],
            objective: Some(((index * 37 + 11) % 101) as f64 * 0.37),
            status: TrialStatus::Completed,
        })
        .collect();
    let history = SweepHistory { records };
    c.bench_function("sweep_suggest_next_20_trials", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            suggest_next(black_box(&history), &space, &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, bench_bpe, bench_bleu, bench_transformer, bench_sweep);
criterion_main!(benches);
