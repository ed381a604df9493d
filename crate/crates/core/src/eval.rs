//! Evaluation metrics (sMAPE, R², precision/recall/F1) and report assembly.
//!
//! The report's `Average` is the mean of the speed R² and the three
//! categorical F1 scores over present tasks. That formula reproduces some
//! published column averages and not others; callers compare and log rather
//! than force agreement.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Task;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and reference lengths differ: {preds} vs {refs}")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("metric needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("positive class does not occur in references")]
    PositiveClassAbsent,
    #[error("no task present in report input")]
    NoTasks,
    #[error("non-finite metric for task {task:?}")]
    NonFiniteMetric { task: Task },
}

fn check_lengths<T, U>(preds: &[T], refs: &[U], min: usize) -> Result<(), EvalError> {
    if preds.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    if preds.len() < min {
        return Err(EvalError::TooFewSamples {
            needed: min,
            got: preds.len(),
        });
    }
    Ok(())
}

/// Symmetric mean absolute percentage error in [0, 2].
///
/// Each term is `|pred - ref| / ((|ref| + |pred|) / 2)`, taken as 0 when
/// both values are 0.
pub fn smape(preds: &[f64], refs: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, refs, 1)?;
    let total: f64 = preds
        .iter()
        .zip(refs)
        .map(|(&p, &r)| {
            let denom = (p.abs() + r.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                (p - r).abs() / denom
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// R² with a degeneracy flag for constant references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub value: f64,
    /// Set when the references have zero variance. `value` is 1.0 when the
    /// predictions are exact and `-inf` otherwise.
    pub degenerate_variance: bool,
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r_squared(preds: &[f64], refs: &[f64]) -> Result<RSquared, EvalError> {
    check_lengths(preds, refs, 2)?;
    let mean = refs.iter().sum::<f64>() / refs.len() as f64;
    let ss_tot: f64 = refs.iter().map(|&r| (r - mean).powi(2)).sum();
    let ss_res: f64 = preds.iter().zip(refs).map(|(&p, &r)| (p - r).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(RSquared {
            value: if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY },
            degenerate_variance: true,
        });
    }
    Ok(RSquared {
        value: 1.0 - ss_res / ss_tot,
        degenerate_variance: false,
    })
}

/// Precision, recall, and F1 for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when no positives were predicted; precision defaults to 1.0.
    pub degenerate_precision: bool,
}

/// Binary one-vs-rest precision/recall/F1 for `positive_class`.
pub fn prf1<T: PartialEq>(preds: &[T], refs: &[T], positive_class: &T) -> Result<Prf1, EvalError> {
    check_lengths(preds, refs, 1)?;
    if !refs.iter().any(|r| r == positive_class) {
        return Err(EvalError::PositiveClassAbsent);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, r) in preds.iter().zip(refs) {
        let pred_pos = p == positive_class;
        let ref_pos = r == positive_class;
        match (pred_pos, ref_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let degenerate_precision = tp + fp == 0;
    let precision = if degenerate_precision {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 {
        precision,
        recall,
        f1,
        degenerate_precision,
    })
}

/// Macro-averaged precision/recall/F1 over the classes present in `refs`.
/// Used for multi-class tasks such as traffic-light color.
pub fn prf1_macro<T>(preds: &[T], refs: &[T]) -> Result<Prf1, EvalError>
where
    T: PartialEq + Eq + Hash + Ord + Clone,
{
    check_lengths(preds, refs, 1)?;
    let mut classes: Vec<T> = refs.to_vec();
    classes.sort();
    classes.dedup();
    let mut sums = (0.0, 0.0, 0.0);
    let mut degenerate = false;
    for class in &classes {
        let m = prf1(preds, refs, class)?;
        sums.0 += m.precision;
        sums.1 += m.recall;
        sums.2 += m.f1;
        degenerate |= m.degenerate_precision;
    }
    let n = classes.len() as f64;
    Ok(Prf1 {
        precision: sums.0 / n,
        recall: sums.1 / n,
        f1: sums.2 / n,
        degenerate_precision: degenerate,
    })
}

/// Aligned prediction/reference values for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskPredictions {
    /// (predicted, reference) pairs of non-negative reals.
    Numeric { preds: Vec<f64>, refs: Vec<f64> },
    /// (predicted, reference) pairs of categorical values.
    Categorical { preds: Vec<String>, refs: Vec<String> },
}

/// Metric values for one task row of the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_squared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl TaskMetrics {
    /// The value this task contributes to the report average: R² for the
    /// numeric task, F1 for categorical tasks.
    pub fn average_component(&self) -> Option<f64> {
        self.r_squared.or(self.f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub model_id: String,
    /// Wall-clock timestamp; excluded from deterministic artifacts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<Task, TaskMetrics>,
    pub average: f64,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Assembles a report from already-computed per-task metrics.
    pub fn from_metrics(
        tasks: BTreeMap<Task, TaskMetrics>,
        provenance: Provenance,
    ) -> Result<Self, EvalError> {
        for (task, metrics) in &tasks {
            let values = [
                metrics.smape,
                metrics.r_squared,
                metrics.precision,
                metrics.recall,
                metrics.f1,
            ];
            if values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFiniteMetric { task: *task });
            }
        }
        let components: Vec<f64> = tasks
            .values()
            .filter_map(TaskMetrics::average_component)
            .collect();
        if components.is_empty() {
            return Err(EvalError::NoTasks);
        }
        let average = components.iter().sum::<f64>() / components.len() as f64;
        Ok(EvalReport {
            tasks,
            average,
            provenance,
        })
    }

    /// Recomputes the average from the stored per-task metrics.
    pub fn recompute_average(&self) -> f64 {
        let components: Vec<f64> = self
            .tasks
            .values()
            .filter_map(TaskMetrics::average_component)
            .collect();
        components.iter().sum::<f64>() / components.len() as f64
    }

    /// Renders the fixed-layout text table: one metric per row, tasks in
    /// report order, Average last.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let col = 24;
        out.push_str(&format!(
            "{:<col$} {:<6} {:>8}\n",
            "Task", "Metric", "Value"
        ));
        out.push_str(&format!("{}\n", "-".repeat(col + 16)));
        for task in Task::ALL {
            let Some(metrics) = self.tasks.get(&task) else {
                continue;
            };
            let rows: Vec<(&str, Option<f64>)> = match task {
                Task::RecommendedSpeed => {
                    vec![("sMAPE", metrics.smape), ("R2", metrics.r_squared)]
                }
                _ => vec![
                    ("P", metrics.precision),
                    ("R", metrics.recall),
                    ("F1", metrics.f1),
                ],
            };
            let mut first = true;
            for (name, value) in rows {
                if let Some(v) = value {
                    let label = if first { task.display_name() } else { "" };
                    out.push_str(&format!("{label:<col$} {name:<6} {v:>8.3}\n"));
                    first = false;
                }
            }
        }
        out.push_str(&format!("{}\n", "-".repeat(col + 16)));
        out.push_str(&format!(
            "{:<col$} {:<6} {:>8.3}\n",
            "Average", "", self.average
        ));
        out
    }
}

/// Computes per-task metrics from raw predictions and assembles the report.
pub fn build_report(
    data: &BTreeMap<Task, TaskPredictions>,
    provenance: Provenance,
) -> Result<EvalReport, EvalError> {
    let mut tasks = BTreeMap::new();
    for (&task, predictions) in data {
        let metrics = match predictions {
            TaskPredictions::Numeric { preds, refs } => TaskMetrics {
                smape: Some(smape(preds, refs)?),
                r_squared: Some(r_squared(preds, refs)?.value),
                ..TaskMetrics::default()
            },
            TaskPredictions::Categorical { preds, refs } => {
                let m = match task {
                    // Multi-class: macro-average over classes present in refs.
                    Task::TrafficLights => prf1_macro(preds, refs)?,
                    // Binary presence tasks: positive class is "true".
                    _ => prf1(preds, refs, &"true".to_string())?,
                };
                TaskMetrics {
                    precision: Some(m.precision),
                    recall: Some(m.recall),
                    f1: Some(m.f1),
                    ..TaskMetrics::default()
                }
            }
        };
        tasks.insert(task, metrics);
    }
    EvalReport::from_metrics(tasks, provenance)
}
