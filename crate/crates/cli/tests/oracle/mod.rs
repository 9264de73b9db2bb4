//! Independent reference implementations used only by the acceptance
//! gate. They favor directness over speed so that any disagreement
//! points at the production code, not at a shared abstraction.

pub mod bleu {
    /// Corpus BLEU by literal counting: distinct n-grams are found by
    /// linear scans (no hash maps), precisions pooled over the corpus.
    pub struct Score {
        pub bleu: f64,
        pub precisions: [f64; 4],
        pub brevity_penalty: f64,
    }

    fn occurrences<T: Eq>(haystack: &[T], n: usize, gram: &[T]) -> u64 {
        if haystack.len() < n {
            return 0;
        }
        (0..=haystack.len() - n)
            .filter(|&i| &haystack[i..i + n] == gram)
            .count() as u64
    }

    pub fn corpus<T: Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Score {
        assert_eq!(hyps.len(), refs.len());
        let mut clipped = [0u64; 4];
        let mut totals = [0u64; 4];
        for (hyp, reference) in hyps.iter().zip(refs) {
            for n in 1..=4usize {
                if hyp.len() < n {
                    continue;
                }
                totals[n - 1] += (hyp.len() - n + 1) as u64;
                let mut seen: Vec<&[T]> = Vec::new();
                for i in 0..=hyp.len() - n {
                    let gram = &hyp[i..i + n];
                    if seen.iter().any(|g| *g == gram) {
                        continue;
                    }
                    seen.push(gram);
                    clipped[n - 1] +=
                        occurrences(hyp, n, gram).min(occurrences(reference, n, gram));
                }
            }
        }

        let hyp_len: u64 = hyps.iter().map(|h| h.len() as u64).sum();
        let ref_len: u64 = refs.iter().map(|r| r.len() as u64).sum();
        let brevity_penalty = if hyp_len == 0 {
            0.0
        } else if hyp_len >= ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        };

        let mut precisions = [0.0f64; 4];
        for n in 0..4 {
            if totals[n] > 0 {
                precisions[n] = clipped[n] as f64 / totals[n] as f64;
            }
        }
        let bleu = if precisions.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            let log_mean: f64 = precisions.iter().map(|p| 0.25 * p.ln()).sum();
            100.0 * brevity_penalty * log_mean.exp()
        };
        Score {
            bleu,
            precisions,
            brevity_penalty,
        }
    }
}

pub mod bpe {
    use std::collections::{BTreeMap, HashMap};

    const END_OF_WORD: &str = "</w>";

    fn word_symbols(word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let last = chars.len().saturating_sub(1);
        chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == last {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                }
            })
            .collect()
    }

    /// One left-to-right pass fusing non-overlapping occurrences; a pair
    /// cannot recur after the pass because the fusion renames both halves.
    fn apply(symbols: &[String], pair: &(String, String)) -> Vec<String> {
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

    /// Recounts every adjacent pair from scratch each round: frequency
    /// weighted by word count, highest count wins, ties broken by
    /// lexicographically smallest pair, stop below count 2.
    pub fn learn(word_freqs: &HashMap<String, u64>, num_merges: usize) -> Vec<(String, String)> {
        let mut words: Vec<(Vec<String>, u64)> = word_freqs
            .iter()
            .filter(|(w, _)| !w.is_empty())
            .map(|(w, &c)| (word_symbols(w), c))
            .collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            // BTreeMap iterates in ascending pair order, so a strict
            // comparison keeps the lexicographically smallest maximum.
            let mut best: Option<(&(String, String), u64)> = None;
            for (pair, &count) in &counts {
                if count >= 2 && best.is_none_or(|(_, c)| count > c) {
                    best = Some((pair, count));
                }
            }
            let Some((pair, _)) = best else { break };
            let pair = pair.clone();
            for (symbols, _) in &mut words {
                *symbols = apply(symbols, &pair);
            }
            merges.push(pair);
        }
        merges
    }

    /// Encodes one word by replaying the merge list in learned order.
    pub fn encode(merges: &[(String, String)], word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        for pair in merges {
            symbols = apply(&symbols, pair);
        }
        symbols
    }
}

pub mod gp {
    /// Shares only the mathematical definition with the production code:
    /// the kernel matrix is solved by Gauss-Jordan elimination instead of
    /// a Cholesky factorization.
    const LENGTH_SCALE: f64 = 0.3;
    const JITTER: f64 = 1e-6;
    const VARIANCE_FLOOR: f64 = 1e-6;
    pub const XI: f64 = 0.01;

    fn sample_variance(values: &[f64]) -> f64 {
        if values.len() < 2 {
            return 0.0;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
    }

    fn kernel(a: &[f64; 3], b: &[f64; 3], sigma2: f64) -> f64 {
        let d2: f64 = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum();
        sigma2 * (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
    }

    /// Inverts a square matrix with partial pivoting.
    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut aug: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&p, &q| aug[p][col].abs().total_cmp(&aug[q][col].abs()))
                .unwrap();
            aug.swap(col, pivot);
            let scale = aug[col][col];
            assert!(scale.abs() > 1e-300, "singular kernel matrix");
            for v in &mut aug[col] {
                *v /= scale;
            }
            for row in 0..n {
                if row == col {
                    continue;
                }
                let factor = aug[row][col];
                for j in 0..2 * n {
                    aug[row][j] -= factor * aug[col][j];
                }
            }
        }
        aug.into_iter().map(|row| row[n..].to_vec()).collect()
    }

    /// Posterior (mean, stddev) on the raw objective scale.
    pub fn posterior(points: &[[f64; 3]], objectives: &[f64], query: &[f64; 3]) -> (f64, f64) {
        let n = points.len();
        let y_mean = objectives.iter().sum::<f64>() / n as f64;
        let y_std = sample_variance(objectives).max(VARIANCE_FLOOR).sqrt();
        let standardized: Vec<f64> = objectives.iter().map(|y| (y - y_mean) / y_std).collect();
        let sigma2 = sample_variance(&standardized).max(VARIANCE_FLOOR);

        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        kernel(&points[i], &points[j], sigma2) + if i == j { JITTER } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let k_inv = invert(&k);
        let k_star: Vec<f64> = points.iter().map(|p| kernel(p, query, sigma2)).collect();

        let alpha: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| k_inv[i][j] * standardized[j]).sum())
            .collect();
        let mean_std: f64 = k_star.iter().zip(&alpha).map(|(k, a)| k * a).sum();
        let quad: f64 = (0..n)
            .map(|i| k_star[i] * (0..n).map(|j| k_inv[i][j] * k_star[j]).sum::<f64>())
            .sum();
        let var_std = (sigma2 - quad).max(0.0);
        (y_mean + y_std * mean_std, y_std * var_std.sqrt())
    }

    pub fn probability_of_improvement(mean: f64, stddev: f64, best: f64) -> f64 {
        if stddev == 0.0 {
            return if mean > best + XI { 1.0 } else { 0.0 };
        }
        0.5 * libm::erfc(-((mean - best - XI) / stddev) / std::f64::consts::SQRT_2)
    }

    /// Log2 position of `value` along its axis, 0 for a degenerate axis.
    pub fn normalize_axis(value: usize, choices: &[usize]) -> f64 {
        let lo = (*choices.iter().min().unwrap() as f64).log2();
        let hi = (*choices.iter().max().unwrap() as f64).log2();
        if hi == lo {
            return 0.0;
        }
        ((value as f64).log2() - lo) / (hi - lo)
    }
}
