//! Tokenization, byte-pair encoding, and indexed vocabularies.
//!
//! Words split on Unicode whitespace with leading/trailing punctuation
//! peeled off; BPE then decomposes each word into subword symbols, with
//! the literal marker `</w>` fused onto the final character so decoding
//! can find word boundaries. Vocabularies reserve ids 0-3 for
//! `<pad>`, `<unk>`, `<bos>`, `<eos>`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use thiserror::Error;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

pub const END_OF_WORD: &str = "</w>";
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

const MERGES_HEADER: &str = "#lug-nmt-bpe v1";

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("vocabulary size cap {cap} is below the 5 needed for specials plus one symbol")]
    SizeCapTooSmall { cap: usize },
    #[error("subword stream does not terminate in {END_OF_WORD}")]
    MissingEndOfWord,
    #[error("id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("duplicate merge pair ({a}, {b})")]
    DuplicateMerge { a: String, b: String },
    #[error("merges file must start with {MERGES_HEADER:?}, found {found:?}")]
    MergesHeader { found: String },
    #[error("merges file line {line}: expected two space-separated symbols, got {text:?}")]
    MergesLine { line: usize, text: String },
    #[error("vocab file line {line}: expected special token {expected:?}, found {found:?}")]
    VocabSpecials {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("vocab file line {line} is empty")]
    VocabEmptyToken { line: usize },
    #[error("duplicate vocabulary token {token:?}")]
    DuplicateToken { token: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn is_punct(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Splits on Unicode whitespace, then peels leading and trailing
/// punctuation characters (Unicode category P) off each chunk as
/// single-character tokens. Interior punctuation stays put; there is no
/// case folding and no empty token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punct(chars[start]) {
            start += 1;
        }
        let core_start = start;
        while end > core_start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        for &c in &chars[..core_start] {
            tokens.push(c.to_string());
        }
        if core_start < end {
            tokens.push(chars[core_start..end].iter().collect());
        }
        for &c in &chars[end..] {
            tokens.push(c.to_string());
        }
    }
    tokens
}

/// Joins tokens with single spaces, attaching punctuation-only tokens to
/// the preceding token without a space. Inverse of [`tokenize`] for text
/// whose punctuation is all word-terminal.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for token in tokens {
        let token = token.as_ref();
        let punct_only = !token.is_empty() && token.chars().all(is_punct);
        if out.is_empty() {
            out.push_str(token);
        } else if punct_only {
            out.push_str(token);
        } else {
            out.push(' ');
            out.push_str(token);
        }
    }
    out
}

/// Counts tokenized words over raw sentences; the input to [`learn_bpe`].
pub fn word_frequencies<'a, I>(sentences: I) -> HashMap<String, u64>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq = HashMap::new();
    for sentence in sentences {
        for token in tokenize(sentence) {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    freq
}

/// Learned merge list. Merge order is learning order; applying the list
/// to a token is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self, SubwordError> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(SubwordError::DuplicateMerge {
                    a: pair.0.clone(),
                    b: pair.1.clone(),
                });
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Splits `token` into subword symbols: characters with `</w>` fused
    /// onto the last one, then merges applied in learned order, each
    /// exhaustively. Implemented as repeated lowest-rank merging, which
    /// yields the same result because a merge can only ever create pairs
    /// of higher rank than itself.
    pub fn encode(&self, token: &str) -> Vec<String> {
        let mut symbols = word_symbols(token);
        if symbols.is_empty() {
            return symbols;
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.ranks.get(&key) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            symbols = apply_merge(&symbols, &self.merges[rank]);
        }
        symbols
    }
}

/// Initial symbol sequence of a word: one symbol per character, with the
/// end-of-word marker appended to the final character's symbol.
fn word_symbols(token: &str) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// One exhaustive left-to-right pass replacing non-overlapping
/// occurrences of `pair` with its fusion.
fn apply_merge(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_merges` merges: each round picks the most frequent
/// adjacent symbol pair (frequency weighted by word count, every adjacent
/// position counted), breaking ties by lexicographically smallest pair,
/// and stops early once no pair occurs at least twice. Empty words are
/// ignored.
pub fn learn_bpe(word_frequencies: &HashMap<String, u64>, num_merges: usize) -> BpeModel {
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut sorted: Vec<(&String, &u64)> = word_frequencies.iter().collect();
        sorted.sort_unstable_by(|a, b| a.0.cmp(b.0));
        sorted
            .into_iter()
            .filter(|(w, _)| !w.is_empty())
            .map(|(w, &c)| (word_symbols(w), c))
            .collect()
    };

    // counts holds the weighted frequency of each adjacent pair; occurs
    // maps a pair to the indices of the words currently containing it.
    let mut counts: HashMap<(String, String), u64> = HashMap::new();
    let mut occurs: HashMap<(String, String), HashSet<usize>> = HashMap::new();
    for (idx, (symbols, count)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            let key = (w[0].clone(), w[1].clone());
            *counts.entry(key.clone()).or_insert(0) += count;
            occurs.entry(key).or_default().insert(idx);
        }
    }

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut best: Option<(&(String, String), u64)> = None;
        for (pair, &count) in &counts {
            if count < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => count > bc || (count == bc && pair < bp),
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();

        let affected: Vec<usize> = occurs
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for idx in affected {
            let count = words[idx].1;
            let old = std::mem::take(&mut words[idx].0);
            let new = apply_merge(&old, &pair);

            for w in old.windows(2) {
                let key = (w[0].clone(), w[1].clone());
                let c = counts.get_mut(&key).expect("pair was counted");
                *c -= count;
                if *c == 0 {
                    counts.remove(&key);
                }
                if let Some(set) = occurs.get_mut(&key) {
                    set.remove(&idx);
                    if set.is_empty() {
                        occurs.remove(&key);
                    }
                }
            }
            for w in new.windows(2) {
                let key = (w[0].clone(), w[1].clone());
                *counts.entry(key.clone()).or_insert(0) += count;
                occurs.entry(key).or_default().insert(idx);
            }
            words[idx].0 = new;
        }
        merges.push(pair);
    }
    BpeModel::new(merges).expect("learning never repeats a pair")
}

/// Applies a model's merges to one token; see [`BpeModel::encode`].
pub fn bpe_encode(model: &BpeModel, token: &str) -> Vec<String> {
    model.encode(token)
}

/// Concatenates symbols and strips the single trailing end-of-word
/// marker. Errors if the stream does not end with one.
pub fn bpe_decode<S: AsRef<str>>(symbols: &[S]) -> Result<String, SubwordError> {
    let mut joined = String::new();
    for s in symbols {
        joined.push_str(s.as_ref());
    }
    joined
        .strip_suffix(END_OF_WORD)
        .map(str::to_string)
        .ok_or(SubwordError::MissingEndOfWord)
}

/// Bijection between subword symbols and ids, with `<pad>`, `<unk>`,
/// `<bos>`, `<eos>` pinned to ids 0-3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from the learned (non-special) symbols in rank order.
    pub fn from_symbols<I, S>(symbols: I) -> Result<Self, SubwordError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(symbols.into_iter().map(Into::into));
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, token) in id_to_token.iter().enumerate() {
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(SubwordError::DuplicateToken {
                    token: token.clone(),
                });
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }
}

/// Ranks symbols by descending frequency (ties broken lexicographically),
/// keeps the top `size_cap - 4`, and prepends the specials. Symbols
/// spelled exactly like a special token are excluded to preserve the
/// id/token bijection.
pub fn build_vocab<I, S>(symbols: I, size_cap: usize) -> Result<Vocabulary, SubwordError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if size_cap < 5 {
        return Err(SubwordError::SizeCapTooSmall { cap: size_cap });
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for symbol in symbols {
        let symbol = symbol.as_ref();
        if SPECIAL_TOKENS.contains(&symbol) {
            continue;
        }
        *freq.entry(symbol.to_string()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size_cap - 4);
    Vocabulary::from_symbols(ranked.into_iter().map(|(t, _)| t))
}

/// Tokenize, BPE-encode each token, and map symbols to ids with `<unk>`
/// for out-of-vocabulary symbols. `<bos>`/`<eos>` are the caller's job.
pub fn encode_ids(vocab: &Vocabulary, bpe: &BpeModel, sentence: &str) -> Vec<usize> {
    tokenize(sentence)
        .iter()
        .flat_map(|token| bpe.encode(token))
        .map(|symbol| vocab.id(&symbol).unwrap_or(UNK_ID))
        .collect()
}

/// Inverts [`encode_ids`]: drops special ids, regroups symbols at
/// end-of-word markers, undoes BPE, and detokenizes. A trailing fragment
/// with no marker (possible in raw model output) is kept as a word rather
/// than rejected.
pub fn decode_ids(vocab: &Vocabulary, ids: &[usize]) -> Result<String, SubwordError> {
    Ok(detokenize(&decode_ids_to_tokens(vocab, ids)?))
}

/// Like [`decode_ids`] but stops before detokenization, returning the word
/// tokens recovered by undoing the subword segmentation. BLEU is scored on
/// this form.
pub fn decode_ids_to_tokens(
    vocab: &Vocabulary,
    ids: &[usize],
) -> Result<Vec<String>, SubwordError> {
    let mut words: Vec<String> = Vec::new();
    let mut group = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(SubwordError::IdOutOfRange {
            id,
            vocab_size: vocab.len(),
        })?;
        if id < SPECIAL_TOKENS.len() {
            continue;
        }
        group.push_str(token);
        if let Some(word) = group.strip_suffix(END_OF_WORD) {
            words.push(word.to_string());
            group.clear();
        }
    }
    if !group.is_empty() {
        words.push(group);
    }
    Ok(words)
}

/// Merges file: header line then one `A B` merge per line, learning order.
pub fn write_merges<W: Write>(model: &BpeModel, mut writer: W) -> Result<(), SubwordError> {
    writeln!(writer, "{MERGES_HEADER}")?;
    for (a, b) in model.merges() {
        writeln!(writer, "{a} {b}")?;
    }
    Ok(())
}

pub fn read_merges<R: BufRead>(reader: R) -> Result<BpeModel, SubwordError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != MERGES_HEADER {
        return Err(SubwordError::MergesHeader { found: header });
    }
    let mut merges = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match line.split_once(' ') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(' ') => {
                merges.push((a.to_string(), b.to_string()));
            }
            _ => {
                return Err(SubwordError::MergesLine {
                    line: i + 2,
                    text: line,
                })
            }
        }
    }
    BpeModel::new(merges)
}

/// Vocab file: one token per line, line number = id, specials first.
pub fn write_vocab<W: Write>(vocab: &Vocabulary, mut writer: W) -> Result<(), SubwordError> {
    for id in 0..vocab.len() {
        writeln!(writer, "{}", vocab.token(id).expect("ids are dense"))?;
    }
    Ok(())
}

pub fn read_vocab<R: BufRead>(reader: R) -> Result<Vocabulary, SubwordError> {
    let mut tokens = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            return Err(SubwordError::VocabEmptyToken { line: i + 1 });
        }
        tokens.push(line);
    }
    for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
        let found = tokens.get(i).cloned().unwrap_or_default();
        if found != *expected {
            return Err(SubwordError::VocabSpecials {
                line: i + 1,
                expected: expected.to_string(),
                found,
            });
        }
    }
    Vocabulary::from_symbols(tokens.into_iter().skip(SPECIAL_TOKENS.len()))
}
