//! Correlation and importance reports over a sweep history.

use serde::Serialize;

use super::forest::forest_importance;
use super::{SweepError, SweepHistory};

/// Pearson r for one hyper-parameter; `degenerate` marks a constant
/// input or objective, where r is pinned to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationEntry {
    pub r: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    /// Per-hyper-parameter Pearson correlation with the objective, in
    /// (dim_model, dim_ff, batch_size) order.
    pub correlation: [CorrelationEntry; 3],
    /// Per-hyper-parameter forest importance weights summing to 1.
    pub importance: [f64; 3],
}

pub(crate) const FEATURE_KEYS: [&str; 3] = ["dim_model", "tm_dim_ff", "batch_size"];

fn pearson(xs: &[f64], ys: &[f64]) -> CorrelationEntry {
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x) * (x - mean_x);
        var_y += (y - mean_y) * (y - mean_y);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return CorrelationEntry {
            r: 0.0,
            degenerate: true,
        };
    }
    CorrelationEntry {
        r: (cov / (var_x.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

fn completed_rows(history: &SweepHistory) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut features = Vec::new();
    let mut objectives = Vec::new();
    for record in history.completed() {
        features.push([
            record.config.dim_model as f64,
            record.config.dim_ff as f64,
            record.config.batch_size as f64,
        ]);
        objectives.push(record.objective.expect("completed trials carry objectives"));
    }
    (features, objectives)
}

/// Pearson correlation of each raw hyper-parameter against the objective
/// over completed trials.
pub fn correlation_report(history: &SweepHistory) -> Result<[CorrelationEntry; 3], SweepError> {
    let (features, objectives) = completed_rows(history);
    if objectives.len() < 2 {
        return Err(SweepError::NotEnoughCompletedTrials {
            context: "correlation_report",
            needed: 2,
            got: objectives.len(),
        });
    }
    let mut out = [CorrelationEntry {
        r: 0.0,
        degenerate: true,
    }; 3];
    for f in 0..3 {
        let column: Vec<f64> = features.iter().map(|row| row[f]).collect();
        out[f] = pearson(&column, &objectives);
    }
    Ok(out)
}

/// Random-forest importance of the raw hyper-parameters over completed
/// trials; requires at least 5 of them.
pub fn importance_report(history: &SweepHistory, seed: u64) -> Result<[f64; 3], SweepError> {
    let (features, objectives) = completed_rows(history);
    if objectives.len() < 5 {
        return Err(SweepError::NotEnoughCompletedTrials {
            context: "importance_report",
            needed: 5,
            got: objectives.len(),
        });
    }
    Ok(forest_importance(&features, &objectives, seed))
}

pub fn build_analysis(history: &SweepHistory, seed: u64) -> Result<AnalysisReport, SweepError> {
    Ok(AnalysisReport {
        correlation: correlation_report(history)?,
        importance: importance_report(history, seed)?,
    })
}

#[derive(Serialize)]
struct ReportWire {
    correlation: WireTriple,
    importance: WireTriple,
}

#[derive(Serialize)]
struct WireTriple {
    dim_model: f64,
    tm_dim_ff: f64,
    batch_size: f64,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let wire = ReportWire {
            correlation: WireTriple {
                dim_model: self.correlation[0].r,
                tm_dim_ff: self.correlation[1].r,
                batch_size: self.correlation[2].r,
            },
            importance: WireTriple {
                dim_model: self.importance[0],
                tm_dim_ff: self.importance[1],
                batch_size: self.importance[2],
            },
        };
        serde_json::to_string(&wire).expect("report serializes")
    }

    /// Markdown table with one row per hyper-parameter. Degenerate
    /// correlations are marked so a constant column is not read as
    /// "no relationship measured cleanly".
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| hyper-parameter | correlation | importance |\n|---|---|---|\n",
        );
        for (i, key) in FEATURE_KEYS.iter().enumerate() {
            let r = if self.correlation[i].degenerate {
                "0.000 (degenerate)".to_string()
            } else {
                format!("{:+.3}", self.correlation[i].r)
            };
            out.push_str(&format!("| {key} | {r} | {:.3} |\n", self.importance[i]));
        }
        out
    }
}
