//! Local Bayesian hyper-parameter search over the (dim_model, dim_ff,
//! batch_size) power-of-two grid, with correlation and random-forest
//! importance reports over the resulting history.
//!
//! Suggestion policy: the first `N_INIT` trials are uniform draws without
//! replacement; afterwards a GP surrogate (see [`gp`]) is fit on
//! completed trials and the untried grid point with the highest
//! probability of improvement (xi = 0.01) is returned, ties breaking to
//! the lexicographically smallest configuration.

pub mod analysis;
pub mod forest;
pub mod gp;

use std::io::{self, BufRead, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{build_analysis, correlation_report, importance_report, AnalysisReport, CorrelationEntry};
pub use forest::forest_importance;
pub use gp::{gp_posterior, probability_of_improvement, GpModel};

pub const N_INIT: usize = 5;
pub const PI_XI: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("every grid configuration has already been tried")]
    GridExhausted,
    #[error("budget must be at least 1")]
    EmptyBudget,
    #[error("{context} needs {needed} completed trials, history has {got}")]
    NotEnoughCompletedTrials {
        context: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("kernel matrix is numerically singular (condition ~{condition:.3e})")]
    SingularKernel { condition: f64 },
    #[error("sweep history line {line}: {message}")]
    HistoryParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The hyper-parameter grid under search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub dim_model_choices: Vec<usize>,
    pub dim_ff_choices: Vec<usize>,
    pub batch_size_choices: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            dim_model_choices: vec![8, 16, 32, 64, 128, 256, 512, 1024, 2048],
            dim_ff_choices: vec![8, 16, 32, 64, 128, 256, 512, 1024, 2048],
            batch_size_choices: vec![8, 16, 32, 64, 128],
        }
    }
}

impl SearchSpace {
    /// All configurations in lexicographic (dim_model, dim_ff,
    /// batch_size) order.
    pub fn grid(&self) -> Vec<TrialConfig> {
        let mut out =
            Vec::with_capacity(self.dim_model_choices.len() * self.dim_ff_choices.len() * self.batch_size_choices.len());
        for &dim_model in &self.dim_model_choices {
            for &dim_ff in &self.dim_ff_choices {
                for &batch_size in &self.batch_size_choices {
                    out.push(TrialConfig {
                        dim_model,
                        dim_ff,
                        batch_size,
                    });
                }
            }
        }
        out
    }

    pub fn contains(&self, config: &TrialConfig) -> bool {
        self.dim_model_choices.contains(&config.dim_model)
            && self.dim_ff_choices.contains(&config.dim_ff)
            && self.batch_size_choices.contains(&config.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialConfig {
    pub dim_model: usize,
    pub dim_ff: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub index: usize,
    pub config: TrialConfig,
    /// Present iff the trial completed; always finite then.
    pub objective: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepHistory {
    pub records: Vec<TrialRecord>,
}

impl SweepHistory {
    pub fn completed(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records
            .iter()
            .filter(|r| r.status == TrialStatus::Completed)
    }

    /// Best completed objective, if any trial completed.
    pub fn best(&self) -> Option<&TrialRecord> {
        self.completed().max_by(|a, b| {
            a.objective
                .unwrap()
                .partial_cmp(&b.objective.unwrap())
                .expect("finite objectives")
        })
    }
}

/// Per-axis log2 normalization of the power-of-two grid onto [0,1]^3.
pub fn normalize_config(config: &TrialConfig, space: &SearchSpace) -> [f64; 3] {
    let axis = |value: usize, choices: &[usize]| -> f64 {
        let lo = (*choices.iter().min().expect("non-empty axis") as f64).log2();
        let hi = (*choices.iter().max().expect("non-empty axis") as f64).log2();
        if hi == lo {
            return 0.0;
        }
        ((value as f64).log2() - lo) / (hi - lo)
    };
    [
        axis(config.dim_model, &space.dim_model_choices),
        axis(config.dim_ff, &space.dim_ff_choices),
        axis(config.batch_size, &space.batch_size_choices),
    ]
}

/// Next configuration to try. Drawing order and tie-breaks are fully
/// deterministic given the history and the RNG state.
pub fn suggest_next(
    history: &SweepHistory,
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
) -> Result<TrialConfig, SweepError> {
    let tried: std::collections::HashSet<TrialConfig> =
        history.records.iter().map(|r| r.config).collect();
    let untried: Vec<TrialConfig> = space
        .grid()
        .into_iter()
        .filter(|c| !tried.contains(c))
        .collect();
    if untried.is_empty() {
        return Err(SweepError::GridExhausted);
    }

    let observed: Vec<([f64; 3], f64)> = history
        .completed()
        .map(|r| (normalize_config(&r.config, space), r.objective.unwrap()))
        .collect();
    // Init phase; also the fallback when every past trial failed and the
    // GP has nothing to fit.
    if history.records.len() < N_INIT || observed.is_empty() {
        let pick = (rng.next_u64() % untried.len() as u64) as usize;
        return Ok(untried[pick]);
    }

    let points: Vec<[f64; 3]> = observed.iter().map(|(p, _)| *p).collect();
    let objectives: Vec<f64> = observed.iter().map(|(_, y)| *y).collect();
    let model = GpModel::fit(points, &objectives)?;
    let best = objectives.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // `untried` inherits the grid's lexicographic order, so keeping the
    // strictly-best PI yields the lexicographically smallest tie winner.
    let mut best_config = untried[0];
    let mut best_pi = f64::NEG_INFINITY;
    for config in &untried {
        let (mean, stddev) = model.posterior(&normalize_config(config, space));
        let pi = probability_of_improvement(mean, stddev, best, PI_XI);
        if pi > best_pi {
            best_pi = pi;
            best_config = *config;
        }
    }
    Ok(best_config)
}

/// Runs `suggest -> evaluate` until the history holds `budget` trials,
/// continuing from `initial` (pass a default history for a fresh run).
/// Evaluator failures are recorded as failed trials and excluded from
/// the surrogate. `on_trial` fires after each new record, enabling
/// incremental persistence.
pub fn run_sweep_with<F, S>(
    space: &SearchSpace,
    initial: SweepHistory,
    budget: usize,
    seed: u64,
    mut evaluator: F,
    mut on_trial: S,
) -> Result<SweepHistory, SweepError>
where
    F: FnMut(&TrialConfig) -> Result<f64, String>,
    S: FnMut(&TrialRecord) -> Result<(), SweepError>,
{
    if budget == 0 {
        return Err(SweepError::EmptyBudget);
    }
    let mut history = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep the draw stream aligned with an uninterrupted run: each
    // historical init-phase trial consumed one draw.
    for _ in 0..history.records.len().min(N_INIT) {
        rng.next_u64();
    }
    while history.records.len() < budget {
        let config = suggest_next(&history, space, &mut rng)?;
        let (objective, status) = match evaluator(&config) {
            Ok(value) if value.is_finite() => (Some(value), TrialStatus::Completed),
            Ok(_) | Err(_) => (None, TrialStatus::Failed),
        };
        let record = TrialRecord {
            index: history.records.len(),
            config,
            objective,
            status,
        };
        on_trial(&record)?;
        history.records.push(record);
    }
    Ok(history)
}

/// Fresh sweep without a persistence hook.
pub fn run_sweep<F>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    evaluator: F,
) -> Result<SweepHistory, SweepError>
where
    F: FnMut(&TrialConfig) -> Result<f64, String>,
{
    run_sweep_with(space, SweepHistory::default(), budget, seed, evaluator, |_| Ok(()))
}

#[derive(Serialize, Deserialize)]
struct TrialLine {
    trial: usize,
    dim_model: usize,
    tm_dim_ff: usize,
    batch_size: usize,
    objective: Option<f64>,
    status: String,
}

/// One history line: `{"trial":..,"dim_model":..,"tm_dim_ff":..,
/// "batch_size":..,"objective":..|null,"status":"completed"|"failed"}`.
pub fn record_to_jsonl(record: &TrialRecord) -> String {
    let line = TrialLine {
        trial: record.index,
        dim_model: record.config.dim_model,
        tm_dim_ff: record.config.dim_ff,
        batch_size: record.config.batch_size,
        objective: record.objective,
        status: match record.status {
            TrialStatus::Completed => "completed".into(),
            TrialStatus::Failed => "failed".into(),
        },
    };
    serde_json::to_string(&line).expect("record serializes")
}

pub fn write_sweep_jsonl<W: Write>(
    history: &SweepHistory,
    mut writer: W,
) -> Result<(), SweepError> {
    for record in &history.records {
        writeln!(writer, "{}", record_to_jsonl(record))?;
    }
    Ok(())
}

pub fn read_sweep_jsonl<R: BufRead>(reader: R) -> Result<SweepHistory, SweepError> {
    let mut history = SweepHistory::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrialLine =
            serde_json::from_str(&line).map_err(|e| SweepError::HistoryParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        let status = match parsed.status.as_str() {
            "completed" => TrialStatus::Completed,
            "failed" => TrialStatus::Failed,
            other => {
                return Err(SweepError::HistoryParse {
                    line: i + 1,
                    message: format!("unknown status {other:?}"),
                })
            }
        };
        if status == TrialStatus::Completed && parsed.objective.is_none() {
            return Err(SweepError::HistoryParse {
                line: i + 1,
                message: "completed trial without objective".into(),
            });
        }
        history.records.push(TrialRecord {
            index: parsed.trial,
            config: TrialConfig {
                dim_model: parsed.dim_model,
                dim_ff: parsed.tm_dim_ff,
                batch_size: parsed.batch_size,
            },
            objective: parsed.objective,
            status,
        });
    }
    Ok(history)
}

/// Smooth synthetic objective with its unique grid optimum at
/// (256, 2048, 16); used by sweep validation runs and benchmarks.
pub fn synthetic_objective(config: &TrialConfig, space: &SearchSpace) -> f64 {
    let z = normalize_config(config, space);
    let target = normalize_config(
        &TrialConfig {
            dim_model: 256,
            dim_ff: 2048,
            batch_size: 16,
        },
        space,
    );
    let d2: f64 = (0..3).map(|i| (z[i] - target[i]) * (z[i] - target[i])).sum();
    100.0 * (-d2 / (2.0 * 0.35 * 0.35)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_405_lexicographic_points() {
        let space = SearchSpace::default();
        let grid = space.grid();
        assert_eq!(grid.len(), 405);
        let mut sorted = grid.clone();
        sorted.sort();
        assert_eq!(grid, sorted);
        assert!(grid.iter().all(|c| {
            c.dim_model.is_power_of_two()
                && c.dim_ff.is_power_of_two()
                && c.batch_size.is_power_of_two()
        }));
    }

    #[test]
    fn normalization_maps_grid_corners_and_midpoint() {
        let space = SearchSpace::default();
        let min = TrialConfig {
            dim_model: 8,
            dim_ff: 8,
            batch_size: 8,
        };
        assert_eq!(normalize_config(&min, &space), [0.0, 0.0, 0.0]);
        let max = TrialConfig {
            dim_model: 2048,
            dim_ff: 2048,
            batch_size: 128,
        };
        assert_eq!(normalize_config(&max, &space), [1.0, 1.0, 1.0]);
        let mid = TrialConfig {
            dim_model: 128,
            dim_ff: 8,
            batch_size: 8,
        };
        assert_eq!(normalize_config(&mid, &space)[0], 0.5);
    }

    #[test]
    fn init_suggestions_are_deterministic_and_distinct() {
        let space = SearchSpace::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut history = SweepHistory::default();
            let mut picks = Vec::new();
            for i in 0..N_INIT {
                let config = suggest_next(&history, &space, &mut rng).unwrap();
                picks.push(config);
                history.records.push(TrialRecord {
                    index: i,
                    config,
                    objective: Some(10.0 + i as f64),
                    status: TrialStatus::Completed,
                });
            }
            picks
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), N_INIT);
    }

    #[test]
    fn forced_last_point_and_exhaustion() {
        let space = SearchSpace::default();
        let grid = space.grid();
        let missing = grid[217];
        let mut history = SweepHistory::default();
        for (i, config) in grid.iter().enumerate() {
            if *config == missing {
                continue;
            }
            history.records.push(TrialRecord {
                index: history.records.len(),
                config: *config,
                objective: Some((i % 7) as f64),
                status: TrialStatus::Completed,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(suggest_next(&history, &space, &mut rng).unwrap(), missing);
        history.records.push(TrialRecord {
            index: history.records.len(),
            config: missing,
            objective: None,
            status: TrialStatus::Failed,
        });
        assert!(matches!(
            suggest_next(&history, &space, &mut rng),
            Err(SweepError::GridExhausted)
        ));
    }

    #[test]
    fn all_failed_history_falls_back_to_random_draws() {
        let space = SearchSpace::default();
        let mut history = SweepHistory::default();
        for i in 0..8 {
            history.records.push(TrialRecord {
                index: i,
                config: space.grid()[i * 3],
                objective: None,
                status: TrialStatus::Failed,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = suggest_next(&history, &space, &mut rng).unwrap();
        assert!(space.contains(&config));
        assert!(history.records.iter().all(|r| r.config != config));
    }

    #[test]
    fn sweep_never_repeats_configurations() {
        let space = SearchSpace::default();
        let history = run_sweep(&space, 50, 3, |c| Ok(synthetic_objective(c, &space))).unwrap();
        assert_eq!(history.records.len(), 50);
        let distinct: std::collections::HashSet<_> =
            history.records.iter().map(|r| r.config).collect();
        assert_eq!(distinct.len(), 50);
    }

    #[test]
    fn budget_one_runs_single_random_trial() {
        let space = SearchSpace::default();
        let history = run_sweep(&space, 1, 9, |c| Ok(synthetic_objective(c, &space))).unwrap();
        assert_eq!(history.records.len(), 1);
        assert_eq!(history.records[0].status, TrialStatus::Completed);
        assert!(matches!(
            run_sweep(&space, 0, 9, |_| Ok(0.0)),
            Err(SweepError::EmptyBudget)
        ));
    }

    #[test]
    fn evaluator_failures_are_recorded_and_skipped() {
        let space = SearchSpace::default();
        let mut calls = 0;
        let history = run_sweep(&space, 8, 4, |c| {
            calls += 1;
            if calls % 2 == 0 {
                Err("exploded".to_string())
            } else {
                Ok(synthetic_objective(c, &space))
            }
        })
        .unwrap();
        assert_eq!(history.records.len(), 8);
        let failed = history
            .records
            .iter()
            .filter(|r| r.status == TrialStatus::Failed)
            .count();
        assert_eq!(failed, 4);
        assert!(history
            .records
            .iter()
            .filter(|r| r.status == TrialStatus::Failed)
            .all(|r| r.objective.is_none()));
        // Non-finite objectives are failures too.
        let history = run_sweep(&space, 1, 4, |_| Ok(f64::NAN)).unwrap();
        assert_eq!(history.records[0].status, TrialStatus::Failed);
    }

    #[test]
    fn sweep_is_deterministic_per_seed() {
        let space = SearchSpace::default();
        let run = || run_sweep(&space, 12, 21, |c| Ok(synthetic_objective(c, &space))).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_covers_remaining_budget_without_repeats() {
        let space = SearchSpace::default();
        let full = run_sweep(&space, 10, 13, |c| Ok(synthetic_objective(c, &space))).unwrap();
        let partial = SweepHistory {
            records: full.records[..4].to_vec(),
        };
        let resumed = run_sweep_with(&space, partial, 10, 13, |c| {
            Ok(synthetic_objective(c, &space))
        }, |_| Ok(()))
        .unwrap();
        assert_eq!(resumed.records.len(), 10);
        let distinct: std::collections::HashSet<_> =
            resumed.records.iter().map(|r| r.config).collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn history_jsonl_round_trips_with_pinned_keys() {
        let history = SweepHistory {
            records: vec![
                TrialRecord {
                    index: 0,
                    config: TrialConfig {
                        dim_model: 256,
                        dim_ff: 2048,
                        batch_size: 16,
                    },
                    objective: Some(17.25),
                    status: TrialStatus::Completed,
                },
                TrialRecord {
                    index: 1,
                    config: TrialConfig {
                        dim_model: 8,
                        dim_ff: 8,
                        batch_size: 128,
                    },
                    objective: None,
                    status: TrialStatus::Failed,
                },
            ],
        };
        let mut buf = Vec::new();
        write_sweep_jsonl(&history, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "{\"trial\":0,\"dim_model\":256,\"tm_dim_ff\":2048,\"batch_size\":16,\"objective\":17.25,\"status\":\"completed\"}"
        );
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "{\"trial\":1,\"dim_model\":8,\"tm_dim_ff\":8,\"batch_size\":128,\"objective\":null,\"status\":\"failed\"}"
        );
        let parsed = read_sweep_jsonl(buf.as_slice()).unwrap();
        assert_eq!(parsed, history);
    }

    #[test]
    fn malformed_history_lines_are_rejected() {
        let bad = b"{\"trial\":0,\"dim_model\":8}\n" as &[u8];
        assert!(matches!(
            read_sweep_jsonl(bad),
            Err(SweepError::HistoryParse { line: 1, .. })
        ));
        let bad_status =
            b"{\"trial\":0,\"dim_model\":8,\"tm_dim_ff\":8,\"batch_size\":8,\"objective\":1.0,\"status\":\"odd\"}\n"
                as &[u8];
        assert!(matches!(
            read_sweep_jsonl(bad_status),
            Err(SweepError::HistoryParse { line: 1, .. })
        ));
    }

    #[test]
    fn sweep_finds_near_optimal_configs_on_synthetic_objective() {
        let space = SearchSpace::default();
        let mut all: Vec<f64> = space
            .grid()
            .iter()
            .map(|c| synthetic_objective(c, &space))
            .collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top5_threshold = all[19]; // top 5% of 405 = top 20 values

        let mut hits = 0;
        for seed in 0..5 {
            let history =
                run_sweep(&space, 30, seed, |c| Ok(synthetic_objective(c, &space))).unwrap();
            let best = history.best().unwrap().objective.unwrap();
            if best >= top5_threshold {
                hits += 1;
            }
        }
        assert!(hits >= 4, "only {hits}/5 seeds reached the top 5%");
    }
}
