//! Regression random forest for hyper-parameter importance.
//!
//! 200 trees on bootstrap resamples; each split considers one of the
//! three features chosen at random; splits maximize variance (SSE)
//! reduction and trees grow until leaves are pure or hold one sample.
//! Importance is the per-feature sum of SSE reductions over all splits,
//! normalized to sum to 1. All randomness comes from the caller's seed.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

pub const N_TREES: usize = 200;
const N_FEATURES: usize = 3;

/// Sum of squared deviations from the mean, computed from moments.
fn sse(sum: f64, sum_sq: f64, n: f64) -> f64 {
    (sum_sq - sum * sum / n).max(0.0)
}

struct TreeBuilder<'a> {
    features: &'a [[f64; N_FEATURES]],
    targets: &'a [f64],
    importance: [f64; N_FEATURES],
}

impl<'a> TreeBuilder<'a> {
    /// Splits `rows` recursively, accumulating SSE reductions.
    fn grow(&mut self, rows: &mut [usize], rng: &mut ChaCha8Rng) {
        if rows.len() < 2 {
            return;
        }
        let (sum, sum_sq) = rows.iter().fold((0.0, 0.0), |(s, q), &r| {
            (s + self.targets[r], q + self.targets[r] * self.targets[r])
        });
        let parent_sse = sse(sum, sum_sq, rows.len() as f64);
        if parent_sse == 0.0 {
            return; // pure leaf
        }

        let feature = (rng.next_u64() % N_FEATURES as u64) as usize;
        rows.sort_unstable_by(|&a, &b| {
            self.features[a][feature]
                .partial_cmp(&self.features[b][feature])
                .expect("finite feature values")
        });

        // Scan split boundaries between distinct adjacent feature values.
        let mut best: Option<(f64, usize)> = None; // (reduction, left size)
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for i in 0..rows.len() - 1 {
            let y = self.targets[rows[i]];
            left_sum += y;
            left_sq += y * y;
            if self.features[rows[i]][feature] == self.features[rows[i + 1]][feature] {
                continue;
            }
            let left_n = (i + 1) as f64;
            let right_n = (rows.len() - i - 1) as f64;
            let children = sse(left_sum, left_sq, left_n)
                + sse(sum - left_sum, sum_sq - left_sq, right_n);
            let reduction = parent_sse - children;
            if best.map_or(true, |(r, _)| reduction > r) {
                best = Some((reduction, i + 1));
            }
        }
        // The drawn feature may be constant within the node; then no
        // split exists and the node becomes a leaf.
        let Some((reduction, split_at)) = best else { return };
        self.importance[feature] += reduction.max(0.0);
        let (left, right) = rows.split_at_mut(split_at);
        self.grow(left, rng);
        self.grow(right, rng);
    }
}

/// Importance weights for (dim_model, dim_ff, batch_size) features,
/// summing to 1. Falls back to uniform weights when no split anywhere
/// reduces variance (constant features or constant objective).
pub fn forest_importance(
    features: &[[f64; N_FEATURES]],
    targets: &[f64],
    seed: u64,
) -> [f64; N_FEATURES] {
    assert_eq!(features.len(), targets.len());
    let n = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = [0.0f64; N_FEATURES];
    for _ in 0..N_TREES {
        let mut rows: Vec<usize> = (0..n)
            .map(|_| (rng.next_u64() % n as u64) as usize)
            .collect();
        let mut builder = TreeBuilder {
            features,
            targets,
            importance: [0.0; N_FEATURES],
        };
        builder.grow(&mut rows, &mut rng);
        for f in 0..N_FEATURES {
            totals[f] += builder.importance[f];
        }
    }
    let total: f64 = totals.iter().sum();
    if total <= 0.0 {
        return [1.0 / N_FEATURES as f64; N_FEATURES];
    }
    totals.map(|t| t / total)
}
