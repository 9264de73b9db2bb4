//! Canonical artifact locations inside the output directory. Every
//! subcommand reads and writes through these helpers so the on-disk
//! layout stays consistent across runs.

use std::path::{Path, PathBuf};

use lugnmt_core::corpus::Direction;

/// Merged corpus before cleaning, one JSON object per line.
pub fn merged_jsonl(out_dir: &Path) -> PathBuf {
    out_dir.join("merged.jsonl")
}

/// Cleaned, deduplicated corpus.
pub fn corpus_jsonl(out_dir: &Path) -> PathBuf {
    out_dir.join("corpus.jsonl")
}

pub fn clean_report_json(out_dir: &Path) -> PathBuf {
    out_dir.join("clean_report.json")
}

/// `which` is one of "train", "valid", "test".
pub fn split_jsonl(out_dir: &Path, which: &str) -> PathBuf {
    out_dir.join(format!("{which}.jsonl"))
}

/// Merge table for one language side, e.g. `merges.lu.txt`.
pub fn merges_txt(out_dir: &Path, lang: &str) -> PathBuf {
    out_dir.join(format!("merges.{lang}.txt"))
}

pub fn vocab_txt(out_dir: &Path, lang: &str) -> PathBuf {
    out_dir.join(format!("vocab.{lang}.txt"))
}

pub fn checkpoint(out_dir: &Path, direction: &Direction) -> PathBuf {
    out_dir.join(format!("model.{direction}.ckpt"))
}

pub fn history_jsonl(out_dir: &Path, direction: &Direction) -> PathBuf {
    out_dir.join(format!("history.{direction}.jsonl"))
}

pub fn sweep_jsonl(out_dir: &Path, direction: &Direction) -> PathBuf {
    out_dir.join(format!("sweep.{direction}.jsonl"))
}

pub fn translations_tsv(out_dir: &Path, direction: &Direction) -> PathBuf {
    out_dir.join(format!("translations.{direction}.tsv"))
}

pub fn analysis_json(out_dir: &Path) -> PathBuf {
    out_dir.join("analysis.json")
}

pub fn analysis_md(out_dir: &Path) -> PathBuf {
    out_dir.join("analysis.md")
}
