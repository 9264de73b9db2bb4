//! Corpus ingestion, merging, cleaning, and deterministic splitting.
//!
//! Three upstream formats feed the pipeline: two-column CSV, JSON (array or
//! JSON-lines) with one key per language, and the unified JSONL corpus file
//! this module writes. All randomness is confined to [`split_corpus`],
//! which shuffles with a seeded ChaCha8 stream so splits are bit-identical
//! across runs and platforms.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("column {column:?} not found in CSV header")]
    CsvColumn { column: String },
    #[error("malformed CSV at line {line}: {message}")]
    CsvParse { line: u64, message: String },
    #[error("record {index}: missing key {key:?}")]
    JsonMissingKey { index: usize, key: String },
    #[error("record {index}: value for {key:?} is not a string")]
    JsonNonString { index: usize, key: String },
    #[error("record {index} is not a JSON object")]
    JsonNotObject { index: usize },
    #[error("invalid JSON: {0}")]
    JsonSyntax(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    JsonlParse { line: usize, message: String },
    #[error("duplicate pair id {id}")]
    DuplicateId { id: usize },
    #[error("cannot merge corpora with directions {expected} and {found}")]
    DirectionMismatch { expected: String, found: String },
    #[error("cannot merge an empty list of corpora")]
    NothingToMerge,
    #[error("split fractions ({train}, {valid}, {test}) invalid: {reason}")]
    InvalidFractions {
        train: f64,
        valid: f64,
        test: f64,
        reason: String,
    },
    #[error("cannot split: {reason}")]
    InvalidSplit { reason: String },
    #[error("direction {0:?} is not of the form src2tgt")]
    InvalidDirection(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Language direction as a pair of labels, e.g. `en2lu` for
/// English source and Luganda target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Direction {
    pub src_lang: String,
    pub tgt_lang: String,
}

impl Direction {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>) -> Self {
        Self {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
        }
    }

    /// Swaps source and target labels.
    pub fn reversed(&self) -> Self {
        Self::new(self.tgt_lang.clone(), self.src_lang.clone())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.src_lang, self.tgt_lang)
    }
}

impl FromStr for Direction {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('2') {
            Some((src, tgt)) if !src.is_empty() && !tgt.is_empty() => {
                Ok(Direction::new(src, tgt))
            }
            _ => Err(CorpusError::InvalidDirection(s.to_string())),
        }
    }
}

/// Which source collection a pair came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Origin {
    Corpus1,
    Corpus2,
    Corpus3,
    Other(String),
}

impl Origin {
    pub fn label(&self) -> &str {
        match self {
            Origin::Corpus1 => "corpus1",
            Origin::Corpus2 => "corpus2",
            Origin::Corpus3 => "corpus3",
            Origin::Other(s) => s,
        }
    }

    /// Inverse of [`Origin::label`]. An `Other` label that collides with a
    /// reserved name reads back as the reserved variant.
    pub fn from_label(label: &str) -> Self {
        match label {
            "corpus1" => Origin::Corpus1,
            "corpus2" => Origin::Corpus2,
            "corpus3" => Origin::Corpus3,
            other => Origin::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One aligned sentence pair. `id` is unique within its corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub id: usize,
    pub src: String,
    pub tgt: String,
    pub origin: Origin,
}

/// Ordered collection of pairs sharing one language direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub direction: Direction,
}

impl Corpus {
    pub fn new(direction: Direction) -> Self {
        Self {
            pairs: Vec::new(),
            direction,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Fractions sum to 1 (within 1e-9 to absorb decimal literals like 0.94
/// that have no exact binary form); the seed fixes the shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fs = [self.train_fraction, self.valid_fraction, self.test_fraction];
        let bad = |reason: &str| CorpusError::InvalidFractions {
            train: fs[0],
            valid: fs[1],
            test: fs[2],
            reason: reason.to_string(),
        };
        if fs.iter().any(|f| !f.is_finite() || *f < 0.0 || *f > 1.0) {
            return Err(bad("each fraction must lie in [0, 1]"));
        }
        let sum: f64 = fs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(bad("fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Audit counts from [`clean_corpus`]. Every input pair is either kept or
/// accounted for by exactly one dropped_* counter, so
/// `output_count = input_count - dropped_empty - dropped_duplicates -
/// dropped_overlong`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_count: usize,
    pub output_count: usize,
    pub dropped_empty: usize,
    pub dropped_duplicates: usize,
    pub dropped_overlong: usize,
    pub normalized_whitespace: usize,
}

/// Parses a two-column (plus ignored extras) CSV with a header row.
/// RFC-4180 quoting applies. Row order is preserved; ids run 0..N-1.
pub fn parse_csv_corpus(
    text: &str,
    src_column: &str,
    tgt_column: &str,
    origin: Origin,
    direction: Direction,
) -> Result<Corpus, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| csv_parse_error(&e))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::CsvColumn {
                column: name.to_string(),
            })
    };
    let src_idx = col(src_column)?;
    let tgt_idx = col(tgt_column)?;

    let mut corpus = Corpus::new(direction);
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_parse_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| {
            record.get(idx).ok_or(CorpusError::CsvParse {
                line,
                message: format!("row has no field {idx}"),
            })
        };
        corpus.pairs.push(SentencePair {
            id: i,
            src: field(src_idx)?.to_string(),
            tgt: field(tgt_idx)?.to_string(),
            origin: origin.clone(),
        });
    }
    Ok(corpus)
}

fn csv_parse_error(e: &csv::Error) -> CorpusError {
    let line = e.position().map_or(0, |p| p.line());
    CorpusError::CsvParse {
        line,
        message: e.to_string(),
    }
}

/// Parses either a top-level JSON array of objects or JSON-lines. Records
/// may carry any number of extra keys; only `src_key` and `tgt_key` are
/// read and both must be strings.
pub fn parse_json_corpus(
    text: &str,
    src_key: &str,
    tgt_key: &str,
    origin: Origin,
    direction: Direction,
) -> Result<Corpus, CorpusError> {
    let trimmed = text.trim_start();
    let records: Vec<serde_json::Value> = if trimmed.starts_with('[') {
        serde_json::from_str(text)?
    } else {
        let mut out = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line)?);
        }
        out
    };

    let mut corpus = Corpus::new(direction);
    for (index, record) in records.iter().enumerate() {
        let obj = record
            .as_object()
            .ok_or(CorpusError::JsonNotObject { index })?;
        let pick = |key: &str| -> Result<String, CorpusError> {
            let value = obj.get(key).ok_or_else(|| CorpusError::JsonMissingKey {
                index,
                key: key.to_string(),
            })?;
            value
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| CorpusError::JsonNonString {
                    index,
                    key: key.to_string(),
                })
        };
        corpus.pairs.push(SentencePair {
            id: index,
            src: pick(src_key)?,
            tgt: pick(tgt_key)?,
            origin: origin.clone(),
        });
    }
    Ok(corpus)
}

/// Concatenates corpora in argument order, reassigning ids to 0..N-1.
/// Origins are preserved; nothing is deduplicated here.
pub fn merge_corpora(corpora: Vec<Corpus>) -> Result<Corpus, CorpusError> {
    let mut iter = corpora.into_iter();
    let first = iter.next().ok_or(CorpusError::NothingToMerge)?;
    let mut merged = Corpus::new(first.direction.clone());
    merged.pairs = first.pairs;
    for corpus in iter {
        if corpus.direction != merged.direction {
            return Err(CorpusError::DirectionMismatch {
                expected: merged.direction.to_string(),
                found: corpus.direction.to_string(),
            });
        }
        merged.pairs.extend(corpus.pairs);
    }
    for (i, pair) in merged.pairs.iter_mut().enumerate() {
        pair.id = i;
    }
    Ok(merged)
}

/// Per pair: NFC-normalize, collapse whitespace runs to single spaces and
/// trim; then drop pairs with an empty side, pairs longer than
/// `max_len_tokens` whitespace tokens on either side, and exact (src, tgt)
/// duplicates (first occurrence wins). Kept pairs retain their ids.
/// Cleaning is total and idempotent.
pub fn clean_corpus(corpus: &Corpus, max_len_tokens: usize) -> (Corpus, CleanReport) {
    let mut report = CleanReport {
        input_count: corpus.len(),
        ..CleanReport::default()
    };
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut out = Corpus::new(corpus.direction.clone());
    for pair in &corpus.pairs {
        let src_nfc: String = pair.src.nfc().collect();
        let tgt_nfc: String = pair.tgt.nfc().collect();
        let src = collapse_whitespace(&src_nfc);
        let tgt = collapse_whitespace(&tgt_nfc);
        if src != src_nfc || tgt != tgt_nfc {
            report.normalized_whitespace += 1;
        }
        if src.is_empty() || tgt.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        if token_count(&src) > max_len_tokens || token_count(&tgt) > max_len_tokens {
            report.dropped_overlong += 1;
            continue;
        }
        if !seen.insert((src.clone(), tgt.clone())) {
            report.dropped_duplicates += 1;
            continue;
        }
        out.pairs.push(SentencePair {
            id: pair.id,
            src,
            tgt,
            origin: pair.origin.clone(),
        });
    }
    report.output_count = out.len();
    (out, report)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Splits into (train, valid, test) by shuffling pair indices with a
/// Fisher-Yates pass driven by ChaCha8 seeded from `spec.seed` (swap
/// index drawn as `next_u64() % (i + 1)` from the top down). Sizes are
/// `n_test = round_half_up(test_fraction * N)`, `n_valid` likewise, and
/// train takes the remainder. Each output keeps the input's relative
/// order and original ids, so the three parts partition the input.
pub fn split_corpus(
    corpus: &Corpus,
    spec: &SplitSpec,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    spec.validate()?;
    let n = corpus.len();
    if n == 0 {
        return Err(CorpusError::InvalidSplit {
            reason: "corpus is empty".to_string(),
        });
    }
    let all_nonzero =
        spec.train_fraction > 0.0 && spec.valid_fraction > 0.0 && spec.test_fraction > 0.0;
    if n < 3 && all_nonzero {
        return Err(CorpusError::InvalidSplit {
            reason: format!("{n} pairs cannot fill three non-empty parts"),
        });
    }
    let round_half_up = |x: f64| (x + 0.5).floor() as usize;
    let n_test = round_half_up(spec.test_fraction * n as f64);
    let n_valid = round_half_up(spec.valid_fraction * n as f64);
    if n_test + n_valid > n {
        return Err(CorpusError::InvalidSplit {
            reason: format!(
                "rounded test ({n_test}) + valid ({n_valid}) exceed corpus size {n}"
            ),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }

    let collect = |picked: &[usize]| {
        let mut sorted: Vec<usize> = picked.to_vec();
        sorted.sort_unstable();
        Corpus {
            pairs: sorted.iter().map(|&i| corpus.pairs[i].clone()).collect(),
            direction: corpus.direction.clone(),
        }
    };
    let test = collect(&order[..n_test]);
    let valid = collect(&order[n_test..n_test + n_valid]);
    let train = collect(&order[n_test + n_valid..]);
    Ok((train, valid, test))
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    id: usize,
    src: String,
    tgt: String,
    origin: String,
}

/// Writes the unified corpus format: one JSON object per line with keys
/// `id`, `src`, `tgt`, `origin` in that order, LF line endings.
pub fn write_corpus_jsonl<W: Write>(corpus: &Corpus, mut writer: W) -> Result<(), CorpusError> {
    for pair in &corpus.pairs {
        let record = PairRecord {
            id: pair.id,
            src: pair.src.clone(),
            tgt: pair.tgt.clone(),
            origin: pair.origin.label().to_string(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads the unified corpus format. Ids are taken from the file and must
/// be unique; the direction is supplied by the caller because the format
/// carries none.
pub fn read_corpus_jsonl<R: BufRead>(
    reader: R,
    direction: Direction,
) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new(direction);
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::JsonlParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id) {
            return Err(CorpusError::DuplicateId { id: record.id });
        }
        corpus.pairs.push(SentencePair {
            id: record.id,
            src: record.src,
            tgt: record.tgt,
            origin: Origin::from_label(&record.origin),
        });
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn en2lu() -> Direction {
        Direction::new("en", "lu")
    }

    fn pair(id: usize, src: &str, tgt: &str) -> SentencePair {
        SentencePair {
            id,
            src: src.to_string(),
            tgt: tgt.to_string(),
            origin: Origin::Corpus1,
        }
    }

    fn corpus_of(pairs: Vec<SentencePair>) -> Corpus {
        Corpus {
            pairs,
            direction: en2lu(),
        }
    }

    #[test]
    fn csv_single_row() {
        let text = "English,Luganda\nMob Justice is highly Punished,Okutwalira amateeka mu ngalo kibonerezebwa nnyo\n";
        let c = parse_csv_corpus(text, "English", "Luganda", Origin::Corpus1, en2lu()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs[0].src, "Mob Justice is highly Punished");
        assert_eq!(
            c.pairs[0].tgt,
            "Okutwalira amateeka mu ngalo kibonerezebwa nnyo"
        );
        assert_eq!(c.pairs[0].id, 0);
    }

    #[test]
    fn csv_header_only_gives_empty_corpus() {
        let c = parse_csv_corpus("English,Luganda\n", "English", "Luganda", Origin::Corpus1, en2lu())
            .unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn csv_quoted_comma_preserved() {
        let text = "English,Luganda\n\"Yes, please\",weewaawo\n";
        let c = parse_csv_corpus(text, "English", "Luganda", Origin::Corpus1, en2lu()).unwrap();
        assert_eq!(c.pairs[0].src, "Yes, please");
    }

    #[test]
    fn csv_missing_column_names_it() {
        let err = parse_csv_corpus("English,Luganda\n", "Spanish", "Luganda", Origin::Corpus1, en2lu())
            .unwrap_err();
        match err {
            CorpusError::CsvColumn { column } => assert_eq!(column, "Spanish"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        let text = "English,Luganda\nok,fine\n\"unterminated,bad\n";
        let err = parse_csv_corpus(text, "English", "Luganda", Origin::Corpus1, en2lu())
            .unwrap_err();
        match err {
            CorpusError::CsvParse { line, .. } => assert!(line >= 3, "line was {line}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn json_record_with_extra_language_keys() {
        let text = r#"[{"English":"Eggplants always grow best under warm conditions.",
            "Luganda":"Bbiringanya lubeerera asinga kukulira mu mbeera ya bugumu",
            "Runyankole":"x","Ateso":"y","Lugbara":"z","Acholi":"w"}]"#;
        let c = parse_json_corpus(text, "English", "Luganda", Origin::Corpus3, en2lu()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(
            c.pairs[0].src,
            "Eggplants always grow best under warm conditions."
        );
        assert_eq!(c.pairs[0].origin, Origin::Corpus3);
    }

    #[test]
    fn json_array_and_jsonl_agree() {
        let array = r#"[{"a":"one","b":"emu"},{"a":"two","b":"bbiri"}]"#;
        let lines = "{\"a\":\"one\",\"b\":\"emu\"}\n{\"a\":\"two\",\"b\":\"bbiri\"}\n";
        let ca = parse_json_corpus(array, "a", "b", Origin::Corpus2, en2lu()).unwrap();
        let cl = parse_json_corpus(lines, "a", "b", Origin::Corpus2, en2lu()).unwrap();
        assert_eq!(ca, cl);
    }

    #[test]
    fn json_empty_array_is_empty_corpus() {
        let c = parse_json_corpus("[]", "a", "b", Origin::Corpus2, en2lu()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn json_missing_key_reports_index() {
        let text = r#"[{"a":"x","b":"y"},{"a":"x"}]"#;
        let err = parse_json_corpus(text, "a", "b", Origin::Corpus2, en2lu()).unwrap_err();
        match err {
            CorpusError::JsonMissingKey { index, key } => {
                assert_eq!(index, 1);
                assert_eq!(key, "b");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn json_non_string_value_is_type_error() {
        let text = r#"[{"a":"x","b":3}]"#;
        let err = parse_json_corpus(text, "a", "b", Origin::Corpus2, en2lu()).unwrap_err();
        assert!(matches!(err, CorpusError::JsonNonString { index: 0, .. }));
    }

    #[test]
    fn merge_reassigns_ids_and_preserves_origins() {
        let a = corpus_of(vec![pair(5, "one", "emu")]);
        let mut b = corpus_of(vec![pair(9, "two", "bbiri")]);
        b.pairs[0].origin = Origin::Corpus2;
        let m = merge_corpora(vec![a, b]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.pairs[0].id, 0);
        assert_eq!(m.pairs[1].id, 1);
        assert_eq!(m.pairs[1].origin, Origin::Corpus2);
    }

    #[test]
    fn merge_direction_mismatch_errors() {
        let a = corpus_of(vec![pair(0, "one", "emu")]);
        let b = Corpus {
            pairs: vec![pair(0, "emu", "one")],
            direction: Direction::new("lu", "en"),
        };
        assert!(matches!(
            merge_corpora(vec![a, b]),
            Err(CorpusError::DirectionMismatch { .. })
        ));
    }

    #[test]
    fn clean_drops_empty_and_duplicates() {
        let c = corpus_of(vec![
            pair(0, "  hello   world ", "gyebale\u{00A0}ko"),
            pair(1, "hello world", "gyebale ko"),
            pair(2, "bye", ""),
        ]);
        let (cleaned, report) = clean_corpus(&c, 128);
        assert_eq!(cleaned.len(), 1);
        assert_eq!(cleaned.pairs[0].src, "hello world");
        assert_eq!(cleaned.pairs[0].tgt, "gyebale ko");
        assert_eq!(report.dropped_empty, 1);
        assert_eq!(report.dropped_duplicates, 1);
        assert_eq!(report.input_count, 3);
        assert_eq!(report.output_count, 1);
        assert!(report.normalized_whitespace >= 1);
    }

    #[test]
    fn clean_drops_overlong_pairs() {
        let long_src = vec!["w"; 129].join(" ");
        let c = corpus_of(vec![pair(0, &long_src, "ok"), pair(1, "short", "ok")]);
        let (cleaned, report) = clean_corpus(&c, 128);
        assert_eq!(cleaned.len(), 1);
        assert_eq!(report.dropped_overlong, 1);
    }

    #[test]
    fn clean_is_identity_on_clean_input() {
        let c = corpus_of(vec![pair(0, "a b", "c d"), pair(1, "e", "f")]);
        let (cleaned, report) = clean_corpus(&c, 128);
        assert_eq!(cleaned, c);
        assert_eq!(report.dropped_empty, 0);
        assert_eq!(report.dropped_duplicates, 0);
        assert_eq!(report.dropped_overlong, 0);
        assert_eq!(report.normalized_whitespace, 0);
    }

    #[test]
    fn split_sizes_for_full_scale_corpus() {
        let pairs: Vec<SentencePair> = (0..41_070)
            .map(|i| pair(i, &format!("s{i}"), &format!("t{i}")))
            .collect();
        let c = corpus_of(pairs);
        let spec = SplitSpec {
            train_fraction: 0.94,
            valid_fraction: 0.03,
            test_fraction: 0.03,
            seed: 7,
        };
        let (train, valid, test) = split_corpus(&c, &spec).unwrap();
        assert_eq!(train.len(), 38_606);
        assert_eq!(valid.len(), 1_232);
        assert_eq!(test.len(), 1_232);
    }

    #[test]
    fn split_all_train_is_identity() {
        let c = corpus_of(vec![pair(0, "a", "b"), pair(1, "c", "d")]);
        let spec = SplitSpec {
            train_fraction: 1.0,
            valid_fraction: 0.0,
            test_fraction: 0.0,
            seed: 1,
        };
        let (train, valid, test) = split_corpus(&c, &spec).unwrap();
        assert_eq!(train, c);
        assert!(valid.is_empty());
        assert!(test.is_empty());
    }

    #[test]
    fn split_tiny_corpus_with_nonzero_fractions_errors() {
        let c = corpus_of(vec![pair(0, "a", "b"), pair(1, "c", "d")]);
        let spec = SplitSpec {
            train_fraction: 0.4,
            valid_fraction: 0.3,
            test_fraction: 0.3,
            seed: 1,
        };
        assert!(matches!(
            split_corpus(&c, &spec),
            Err(CorpusError::InvalidSplit { .. })
        ));
    }

    #[test]
    fn split_same_seed_identical_different_seed_not() {
        let pairs: Vec<SentencePair> = (0..100)
            .map(|i| pair(i, &format!("s{i}"), &format!("t{i}")))
            .collect();
        let c = corpus_of(pairs);
        let spec = |seed| SplitSpec {
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed,
        };
        let a = split_corpus(&c, &spec(7)).unwrap();
        let b = split_corpus(&c, &spec(7)).unwrap();
        assert_eq!(a, b);
        let d = split_corpus(&c, &spec(8)).unwrap();
        assert_ne!(a.2, d.2);
        assert_eq!(a.2.len(), d.2.len());
    }

    #[test]
    fn invalid_fractions_rejected() {
        let bad = SplitSpec {
            train_fraction: 0.5,
            valid_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        };
        assert!(bad.validate().is_err());
        let negative = SplitSpec {
            train_fraction: 1.2,
            valid_fraction: -0.1,
            test_fraction: -0.1,
            seed: 0,
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    fn jsonl_read_rejects_duplicate_ids() {
        let text = "{\"id\":3,\"src\":\"a\",\"tgt\":\"b\",\"origin\":\"corpus1\"}\n{\"id\":3,\"src\":\"c\",\"tgt\":\"d\",\"origin\":\"corpus1\"}\n";
        let err = read_corpus_jsonl(text.as_bytes(), en2lu()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { id: 3 }));
    }

    #[test]
    fn jsonl_keys_in_canonical_order() {
        let c = corpus_of(vec![pair(0, "a", "b")]);
        let mut buf = Vec::new();
        write_corpus_jsonl(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"id\":0,\"src\":\"a\",\"tgt\":\"b\",\"origin\":\"corpus1\"}\n");
    }

    fn small_text() -> impl Strategy<Value = String> {
        // Includes whitespace runs, non-ASCII, and quotes to stress
        // serialization and cleaning.
        proptest::string::string_regex("[ -~\u{00C0}-\u{00FF}\\t ]{0,20}").unwrap()
    }

    fn arb_corpus(max: usize) -> impl Strategy<Value = Corpus> {
        proptest::collection::vec((small_text(), small_text()), 0..max).prop_map(|items| {
            Corpus {
                pairs: items
                    .into_iter()
                    .enumerate()
                    .map(|(i, (src, tgt))| SentencePair {
                        id: i,
                        src,
                        tgt,
                        origin: Origin::Corpus2,
                    })
                    .collect(),
                direction: Direction::new("en", "lu"),
            }
        })
    }

    proptest! {
        #[test]
        fn merge_preserves_total_count(a in arb_corpus(10), b in arb_corpus(10), c in arb_corpus(10)) {
            let (na, nb, nc) = (a.len(), b.len(), c.len());
            let m = merge_corpora(vec![a, b, c]).unwrap();
            prop_assert_eq!(m.len(), na + nb + nc);
            let ids: HashSet<usize> = m.pairs.iter().map(|p| p.id).collect();
            prop_assert_eq!(ids.len(), m.len());
        }

        #[test]
        fn clean_is_idempotent(c in arb_corpus(20)) {
            let (once, _) = clean_corpus(&c, 8);
            let (twice, report) = clean_corpus(&once, 8);
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(report.dropped_empty, 0);
            prop_assert_eq!(report.dropped_duplicates, 0);
            prop_assert_eq!(report.dropped_overlong, 0);
            prop_assert_eq!(report.normalized_whitespace, 0);
        }

        #[test]
        fn clean_report_accounts_for_every_pair(c in arb_corpus(20)) {
            let (cleaned, r) = clean_corpus(&c, 8);
            prop_assert_eq!(r.input_count, c.len());
            prop_assert_eq!(r.output_count, cleaned.len());
            prop_assert_eq!(
                r.output_count,
                r.input_count - r.dropped_empty - r.dropped_duplicates - r.dropped_overlong
            );
        }

        #[test]
        fn split_partitions_the_corpus(n in 3usize..60, seed in any::<u64>()) {
            let pairs: Vec<SentencePair> = (0..n)
                .map(|i| pair(i, &format!("s{i}"), &format!("t{i}")))
                .collect();
            let c = corpus_of(pairs);
            let spec = SplitSpec {
                train_fraction: 0.6,
                valid_fraction: 0.2,
                test_fraction: 0.2,
                seed,
            };
            let (train, valid, test) = split_corpus(&c, &spec).unwrap();
            prop_assert_eq!(train.len() + valid.len() + test.len(), n);
            let mut ids: Vec<usize> = train.pairs.iter()
                .chain(&valid.pairs)
                .chain(&test.pairs)
                .map(|p| p.id)
                .collect();
            ids.sort_unstable();
            let expected: Vec<usize> = (0..n).collect();
            prop_assert_eq!(ids, expected);
        }

        #[test]
        fn jsonl_round_trip_is_lossless(c in arb_corpus(20)) {
            let mut buf = Vec::new();
            write_corpus_jsonl(&c, &mut buf).unwrap();
            let back = read_corpus_jsonl(buf.as_slice(), c.direction.clone()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
