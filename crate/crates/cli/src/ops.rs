//! One function per subcommand. Every artifact lands inside the output
//! directory; stdout carries results, stderr carries progress notes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lugnmt_core::corpus::{
    clean_corpus, merge_corpora, parse_csv_corpus, parse_json_corpus, read_corpus_jsonl,
    split_corpus, write_corpus_jsonl, Corpus, Direction, Origin, SentencePair,
};
use lugnmt_core::evaluate::{bleu_on_texts, evaluate_model, greedy_decode, write_translations_tsv};
use lugnmt_core::subword::{
    build_vocab, decode_ids, encode_ids, learn_bpe, read_merges, read_vocab, word_frequencies,
    write_merges, write_vocab, BpeModel, Vocabulary,
};
use lugnmt_core::sweep::{
    build_analysis, read_sweep_jsonl, record_to_jsonl, run_sweep_with, SweepHistory, TrialRecord,
};
use lugnmt_core::training::{
    load_checkpoint_file, save_checkpoint_file, train, write_history_jsonl, EncodedPair,
    TrainConfig,
};
use lugnmt_core::transformer::{init_model, Model, ModelConfig};

use crate::config::{InputSpec, PipelineConfig};
use crate::paths;

/// Optional flag overrides shared by train and sweep.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub budget: Option<usize>,
}

// ---------------------------------------------------------------------------
// shared helpers

/// Resolves the requested direction against the stored corpus orientation.
/// Returns the requested direction and whether pairs must be swapped.
fn resolve_direction(config: &PipelineConfig, flag: Option<&str>) -> Result<(Direction, bool)> {
    let stored = config.stored_direction()?;
    let requested = match flag {
        Some(text) => text
            .parse::<Direction>()
            .map_err(|_| anyhow!("direction {text:?} is not like \"lu2en\""))?,
        None => stored.clone(),
    };
    if requested == stored {
        Ok((requested, false))
    } else if requested == stored.reversed() {
        Ok((requested, true))
    } else {
        bail!(
            "direction {requested} does not match the corpus orientation {stored} or its reverse"
        );
    }
}

fn read_split(out_dir: &Path, which: &str, direction: &Direction) -> Result<Corpus> {
    let path = paths::split_jsonl(out_dir, which);
    let file = File::open(&path)
        .with_context(|| format!("opening {} (run the split step first?)", path.display()))?;
    read_corpus_jsonl(BufReader::new(file), direction.clone())
        .with_context(|| format!("parsing {}", path.display()))
}

/// Pairs in the requested orientation; swapping exchanges src and tgt.
fn oriented_pairs(corpus: &Corpus, swap: bool) -> Vec<SentencePair> {
    corpus
        .pairs
        .iter()
        .map(|pair| {
            let mut pair = pair.clone();
            if swap {
                std::mem::swap(&mut pair.src, &mut pair.tgt);
            }
            pair
        })
        .collect()
}

fn load_side(out_dir: &Path, lang: &str) -> Result<(BpeModel, Vocabulary)> {
    let merges_path = paths::merges_txt(out_dir, lang);
    let file = File::open(&merges_path).with_context(|| {
        format!(
            "opening {} (run the bpe step first?)",
            merges_path.display()
        )
    })?;
    let bpe = read_merges(BufReader::new(file))
        .with_context(|| format!("parsing {}", merges_path.display()))?;
    let vocab_path = paths::vocab_txt(out_dir, lang);
    let file =
        File::open(&vocab_path).with_context(|| format!("opening {}", vocab_path.display()))?;
    let vocab = read_vocab(BufReader::new(file))
        .with_context(|| format!("parsing {}", vocab_path.display()))?;
    Ok((bpe, vocab))
}

/// Encodes pairs to subword ids, dropping any that would exceed the model
/// window (the decoder input carries an extra begin-of-sentence slot).
fn encode_pairs(
    pairs: &[SentencePair],
    src_bpe: &BpeModel,
    src_vocab: &Vocabulary,
    tgt_bpe: &BpeModel,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> (Vec<EncodedPair>, usize) {
    let mut encoded = Vec::with_capacity(pairs.len());
    let mut dropped = 0usize;
    for pair in pairs {
        let src = encode_ids(src_vocab, src_bpe, &pair.src);
        let tgt = encode_ids(tgt_vocab, tgt_bpe, &pair.tgt);
        if src.is_empty() || tgt.is_empty() || src.len() > max_len || tgt.len() + 1 > max_len {
            dropped += 1;
            continue;
        }
        encoded.push(EncodedPair { src, tgt });
    }
    (encoded, dropped)
}

fn create_artifact(path: &Path) -> Result<BufWriter<File>> {
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// Fills vocabulary sizes and any seed override into the architecture.
fn resolved_model_config(
    base: &ModelConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    seed: Option<u64>,
) -> ModelConfig {
    let mut config = base.clone();
    config.src_vocab_size = src_vocab.len();
    config.tgt_vocab_size = tgt_vocab.len();
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config
}

// ---------------------------------------------------------------------------
// ingest / split / bpe

pub fn cmd_ingest(config: &PipelineConfig) -> Result<()> {
    config.validate_inputs()?;
    let direction = config.stored_direction()?;
    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;

    let mut corpora = Vec::with_capacity(config.inputs.len());
    for input in &config.inputs {
        let text = fs::read_to_string(input.path())
            .with_context(|| format!("reading {}", input.path().display()))?;
        let corpus = match input {
            InputSpec::Csv {
                src_column,
                tgt_column,
                origin,
                ..
            } => parse_csv_corpus(
                &text,
                src_column,
                tgt_column,
                Origin::from_label(origin),
                direction.clone(),
            ),
            InputSpec::Json {
                src_key,
                tgt_key,
                origin,
                ..
            } => parse_json_corpus(
                &text,
                src_key,
                tgt_key,
                Origin::from_label(origin),
                direction.clone(),
            ),
        }
        .with_context(|| format!("parsing {}", input.path().display()))?;
        corpora.push(corpus);
    }

    let merged = merge_corpora(corpora)?;
    let merged_path = paths::merged_jsonl(&config.out_dir);
    write_corpus_jsonl(&merged, create_artifact(&merged_path)?)?;

    let (cleaned, report) = clean_corpus(&merged, config.clean.max_len_tokens);
    write_corpus_jsonl(&cleaned, create_artifact(&paths::corpus_jsonl(&config.out_dir))?)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    fs::write(
        paths::clean_report_json(&config.out_dir),
        format!("{report_json}\n"),
    )?;

    println!(
        "merged {} pairs from {} inputs; {} after cleaning",
        merged.len(),
        config.inputs.len(),
        cleaned.len()
    );
    Ok(())
}

pub fn cmd_split(config: &PipelineConfig) -> Result<()> {
    let direction = config.stored_direction()?;
    let path = paths::corpus_jsonl(&config.out_dir);
    let file = File::open(&path)
        .with_context(|| format!("opening {} (run ingest first?)", path.display()))?;
    let corpus = read_corpus_jsonl(BufReader::new(file), direction)?;

    let (train_set, valid_set, test_set) = split_corpus(&corpus, &config.split)?;
    for (which, part) in [
        ("train", &train_set),
        ("valid", &valid_set),
        ("test", &test_set),
    ] {
        write_corpus_jsonl(part, create_artifact(&paths::split_jsonl(&config.out_dir, which))?)?;
    }
    println!(
        "split {} pairs into train={} valid={} test={}",
        corpus.len(),
        train_set.len(),
        valid_set.len(),
        test_set.len()
    );
    Ok(())
}

pub fn cmd_bpe(config: &PipelineConfig) -> Result<()> {
    let direction = config.stored_direction()?;
    let train_set = read_split(&config.out_dir, "train", &direction)?;

    for (lang, side) in [
        (&direction.src_lang, 0usize),
        (&direction.tgt_lang, 1usize),
    ] {
        let sentences = train_set.pairs.iter().map(|pair| {
            if side == 0 {
                pair.src.as_str()
            } else {
                pair.tgt.as_str()
            }
        });
        let freqs = word_frequencies(sentences);
        let bpe = learn_bpe(&freqs, config.bpe.num_merges);
        write_merges(&bpe, create_artifact(&paths::merges_txt(&config.out_dir, lang))?)?;

        // Feed every symbol occurrence so the vocabulary keeps the most
        // frequent subwords under the size cap.
        let occurrences = freqs.iter().flat_map(|(word, freq)| {
            bpe.encode(word)
                .into_iter()
                .flat_map(move |symbol| std::iter::repeat(symbol).take(*freq as usize))
        });
        let vocab = build_vocab(occurrences, config.bpe.vocab_size)?;
        write_vocab(&vocab, create_artifact(&paths::vocab_txt(&config.out_dir, lang))?)?;
        println!(
            "{lang}: {} merges, vocabulary of {} symbols",
            bpe.merges().len(),
            vocab.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(
    config: &PipelineConfig,
    direction_flag: Option<&str>,
    overrides: RunOverrides,
) -> Result<()> {
    let stored = config.stored_direction()?;
    let (requested, swap) = resolve_direction(config, direction_flag)?;
    let out_dir = &config.out_dir;

    let train_pairs = oriented_pairs(&read_split(out_dir, "train", &stored)?, swap);
    let valid_pairs = oriented_pairs(&read_split(out_dir, "valid", &stored)?, swap);

    let (src_bpe, src_vocab) = load_side(out_dir, &requested.src_lang)?;
    let (tgt_bpe, tgt_vocab) = load_side(out_dir, &requested.tgt_lang)?;

    let model_config = resolved_model_config(&config.model, &src_vocab, &tgt_vocab, overrides.seed);
    let mut train_config = config.train.clone();
    if let Some(seed) = overrides.seed {
        train_config.seed = seed;
    }
    if let Some(max_epochs) = overrides.max_epochs {
        train_config.max_epochs = max_epochs;
    }

    let max_len = model_config.max_len;
    let (train_encoded, dropped_train) =
        encode_pairs(&train_pairs, &src_bpe, &src_vocab, &tgt_bpe, &tgt_vocab, max_len);
    let (valid_encoded, dropped_valid) =
        encode_pairs(&valid_pairs, &src_bpe, &src_vocab, &tgt_bpe, &tgt_vocab, max_len);
    if dropped_train + dropped_valid > 0 {
        eprintln!(
            "dropped {dropped_train} train and {dropped_valid} valid pairs longer than {max_len} subwords"
        );
    }

    let model = init_model::<f32>(&model_config)?;
    eprintln!(
        "training {requested}: {} parameters, {} train pairs, {} valid pairs",
        lugnmt_core::transformer::count_parameters(&model_config),
        train_encoded.len(),
        valid_encoded.len()
    );
    let (model, history) = train(model, &train_encoded, &valid_encoded, &train_config)?;

    save_checkpoint_file(&model, paths::checkpoint(out_dir, &requested))?;
    write_history_jsonl(&history, create_artifact(&paths::history_jsonl(out_dir, &requested))?)?;

    let best_bleu = history
        .best_epoch
        .and_then(|epoch| {
            history
                .records
                .iter()
                .find(|r| r.epoch == epoch)
                .and_then(|r| r.valid_bleu)
        })
        .unwrap_or(0.0);
    println!(
        "trained {requested}: {} epochs, best epoch {}, valid subword bleu {best_bleu:.3}",
        history.records.len(),
        history.best_epoch.map_or("-".to_string(), |e| e.to_string()),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// translate

pub fn cmd_translate(
    config: &PipelineConfig,
    direction_flag: Option<&str>,
    input: Option<&Path>,
) -> Result<()> {
    let (requested, _) = resolve_direction(config, direction_flag)?;
    let out_dir = &config.out_dir;

    let model = load_model_for(config, &requested)?;
    let (src_bpe, src_vocab) = load_side(out_dir, &requested.src_lang)?;
    let (_, tgt_vocab) = load_side(out_dir, &requested.tgt_lang)?;
    check_vocab_sizes(&model, &src_vocab, &tgt_vocab)?;

    let text = match input {
        Some(path) => {
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => {
            let mut buffer = String::new();
            std::io::stdin()
                .read_to_string(&mut buffer)
                .context("reading stdin")?;
            buffer
        }
    };

    let max_len = model.config.max_len;
    let mut truncated = 0usize;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in text.lines() {
        let mut ids = encode_ids(&src_vocab, &src_bpe, line);
        if ids.len() > max_len {
            ids.truncate(max_len);
            truncated += 1;
        }
        if ids.is_empty() {
            writeln!(out)?;
            continue;
        }
        let out_ids = greedy_decode(&model, &ids, max_len)?;
        writeln!(out, "{}", decode_ids(&tgt_vocab, &out_ids)?)?;
    }
    if truncated > 0 {
        eprintln!("truncated {truncated} overlong input lines to {max_len} subwords");
    }
    Ok(())
}

fn load_model_for(config: &PipelineConfig, direction: &Direction) -> Result<Model<f32>> {
    let path = paths::checkpoint(&config.out_dir, direction);
    load_checkpoint_file(&path)
        .with_context(|| format!("loading checkpoint {} (run train first?)", path.display()))
}

fn check_vocab_sizes(
    model: &Model<f32>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<()> {
    if model.config.src_vocab_size != src_vocab.len()
        || model.config.tgt_vocab_size != tgt_vocab.len()
    {
        bail!(
            "checkpoint was trained with vocabularies of {}/{} symbols but the artifacts hold {}/{}",
            model.config.src_vocab_size,
            model.config.tgt_vocab_size,
            src_vocab.len(),
            tgt_vocab.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Scores plain hypothesis and reference text files line by line.
pub fn cmd_eval_texts(hyp_path: &Path, ref_path: &Path) -> Result<()> {
    let hyp_text = fs::read_to_string(hyp_path)
        .with_context(|| format!("reading {}", hyp_path.display()))?;
    let ref_text = fs::read_to_string(ref_path)
        .with_context(|| format!("reading {}", ref_path.display()))?;
    let hyps: Vec<&str> = hyp_text.lines().collect();
    let refs: Vec<&str> = ref_text.lines().collect();
    let result = bleu_on_texts(&hyps, &refs)?;
    println!("{}", result.to_json());
    Ok(())
}

/// Decodes the held-out test set with a trained checkpoint and reports
/// word-level corpus BLEU alongside a translations table.
pub fn cmd_eval_model(config: &PipelineConfig, direction_flag: Option<&str>) -> Result<()> {
    let stored = config.stored_direction()?;
    let (requested, swap) = resolve_direction(config, direction_flag)?;
    let out_dir = &config.out_dir;

    let model = load_model_for(config, &requested)?;
    let (src_bpe, src_vocab) = load_side(out_dir, &requested.src_lang)?;
    let (_, tgt_vocab) = load_side(out_dir, &requested.tgt_lang)?;
    check_vocab_sizes(&model, &src_vocab, &tgt_vocab)?;

    let test_pairs = oriented_pairs(&read_split(out_dir, "test", &stored)?, swap);
    let max_len = model.config.max_len;
    let (kept, skipped): (Vec<SentencePair>, Vec<SentencePair>) = test_pairs
        .into_iter()
        .partition(|pair| encode_ids(&src_vocab, &src_bpe, &pair.src).len() <= max_len);
    if !skipped.is_empty() {
        eprintln!(
            "skipped {} test pairs whose source exceeds {max_len} subwords",
            skipped.len()
        );
    }

    let output = evaluate_model(&model, &kept, &src_bpe, &src_vocab, &tgt_vocab, max_len)?;
    write_translations_tsv(
        &output.rows,
        create_artifact(&paths::translations_tsv(out_dir, &requested))?,
    )?;
    println!("{}", output.bleu.to_json());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

pub fn cmd_sweep(
    config: &PipelineConfig,
    direction_flag: Option<&str>,
    overrides: RunOverrides,
) -> Result<()> {
    let stored = config.stored_direction()?;
    let (requested, swap) = resolve_direction(config, direction_flag)?;
    let out_dir = &config.out_dir;

    let budget = overrides.budget.unwrap_or(config.sweep.budget);
    let seed = overrides.seed.unwrap_or(config.sweep.seed);
    let space = config.sweep.space();

    let history_path = paths::sweep_jsonl(out_dir, &requested);
    let initial = if history_path.is_file() {
        let file = File::open(&history_path)?;
        read_sweep_jsonl(BufReader::new(file))
            .with_context(|| format!("parsing {}", history_path.display()))?
    } else {
        SweepHistory::default()
    };
    if initial.records.len() >= budget {
        println!(
            "sweep already holds {} trials (budget {budget}); nothing to do",
            initial.records.len()
        );
        return Ok(());
    }
    let resumed = initial.records.len();

    let train_pairs = oriented_pairs(&read_split(out_dir, "train", &stored)?, swap);
    let valid_pairs = oriented_pairs(&read_split(out_dir, "valid", &stored)?, swap);
    let (src_bpe, src_vocab) = load_side(out_dir, &requested.src_lang)?;
    let (tgt_bpe, tgt_vocab) = load_side(out_dir, &requested.tgt_lang)?;

    let base_model = resolved_model_config(&config.model, &src_vocab, &tgt_vocab, None);
    let max_len = base_model.max_len;
    let (train_encoded, _) =
        encode_pairs(&train_pairs, &src_bpe, &src_vocab, &tgt_bpe, &tgt_vocab, max_len);
    let (valid_kept, _): (Vec<SentencePair>, Vec<SentencePair>) = valid_pairs
        .into_iter()
        .partition(|pair| encode_ids(&src_vocab, &src_bpe, &pair.src).len() <= max_len);

    let mut base_train = config.train.clone();
    if let Some(max_epochs) = overrides.max_epochs.or(config.sweep.max_epochs) {
        base_train.max_epochs = max_epochs;
    }

    let mut sink = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history_path)
            .with_context(|| format!("opening {}", history_path.display()))?,
    );

    let evaluator = |trial: &lugnmt_core::sweep::TrialConfig| -> Result<f64, String> {
        let mut model_config = base_model.clone();
        model_config.dim_model = trial.dim_model;
        model_config.dim_ff = trial.dim_ff;
        let mut train_config = base_train.clone();
        train_config.batch_size = trial.batch_size;
        run_trial(
            &model_config,
            &train_config,
            &train_encoded,
            &valid_kept,
            &src_bpe,
            &src_vocab,
            &tgt_bpe,
            &tgt_vocab,
        )
        .map_err(|e| format!("{e:#}"))
    };

    let on_trial = |record: &TrialRecord| {
        let line = record_to_jsonl(record);
        eprintln!("{line}");
        writeln!(sink, "{line}").map_err(lugnmt_core::sweep::SweepError::from)?;
        sink.flush().map_err(lugnmt_core::sweep::SweepError::from)
    };

    let history = run_sweep_with(&space, initial, budget, seed, evaluator, on_trial)?;
    println!(
        "sweep {requested}: ran {} new trials ({} total)",
        history.records.len() - resumed,
        history.records.len()
    );
    if let Some(best) = history.best() {
        println!(
            "best trial {}: dim_model={} dim_ff={} batch_size={} bleu={:.3}",
            best.index,
            best.config.dim_model,
            best.config.dim_ff,
            best.config.batch_size,
            best.objective.unwrap_or(0.0)
        );
    }
    Ok(())
}

/// Trains one sweep trial and scores word-level BLEU on the validation set.
#[allow(clippy::too_many_arguments)]
fn run_trial(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_encoded: &[EncodedPair],
    valid_pairs: &[SentencePair],
    src_bpe: &BpeModel,
    src_vocab: &Vocabulary,
    tgt_bpe: &BpeModel,
    tgt_vocab: &Vocabulary,
) -> Result<f64> {
    model_config.validate()?;
    // The trainer needs encoded validation pairs for loss and early
    // stopping; re-derive them from the text so the sweep objective and
    // the stopping signal see the same sentences.
    let valid_encoded: Vec<EncodedPair> = valid_pairs
        .iter()
        .filter_map(|pair| {
            let src = encode_ids(src_vocab, src_bpe, &pair.src);
            let tgt = encode_ids(tgt_vocab, tgt_bpe, &pair.tgt);
            let fits = !src.is_empty()
                && !tgt.is_empty()
                && src.len() <= model_config.max_len
                && tgt.len() + 1 <= model_config.max_len;
            fits.then_some(EncodedPair { src, tgt })
        })
        .collect();
    let model = init_model::<f32>(model_config)?;
    let (model, _) = train(model, train_encoded, &valid_encoded, train_config)?;
    let output = evaluate_model(
        &model,
        valid_pairs,
        src_bpe,
        src_vocab,
        tgt_vocab,
        model_config.max_len,
    )?;
    Ok(output.bleu.bleu)
}

// ---------------------------------------------------------------------------
// report

pub fn cmd_report(config: &PipelineConfig, direction_flag: Option<&str>) -> Result<()> {
    let (requested, _) = resolve_direction(config, direction_flag)?;
    let out_dir = &config.out_dir;

    let history_path = paths::sweep_jsonl(out_dir, &requested);
    let file = File::open(&history_path).with_context(|| {
        format!(
            "opening {} (run sweep first?)",
            history_path.display()
        )
    })?;
    let history = read_sweep_jsonl(BufReader::new(file))?;
    let report = build_analysis(&history, config.sweep.seed)?;

    let json = report.to_json();
    fs::write(paths::analysis_json(out_dir), format!("{json}\n"))?;
    fs::write(paths::analysis_md(out_dir), report.to_markdown())?;
    println!("{json}");
    Ok(())
}

// ---------------------------------------------------------------------------

/// Applies the `--out` override before any subcommand touches the disk.
pub fn apply_out_override(config: &mut PipelineConfig, out: Option<PathBuf>) {
    if let Some(out) = out {
        config.out_dir = out;
    }
}
