//! Binary and support-weighted multi-class F1 over parsed predictions.
//!
//! Schema violations are "no predicted class": they can never add a true or
//! false positive, and they cost a false negative whenever the gold class is
//! the one under evaluation. All 0/0 ratios resolve to 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::{Outcome, ParsedPrediction};
use crate::Score;

/// One scored case: gold label plus the parsed prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub gold: u32,
    pub prediction: ParsedPrediction,
}

impl EvalOutcome {
    pub fn new(gold: u32, prediction: ParsedPrediction) -> Self {
        EvalOutcome { gold, prediction }
    }
}

/// Per-class one-vs-rest scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u32,
    pub precision: Score,
    pub recall: Score,
    pub f1: Score,
    pub support: usize,
}

/// Task-level scores. `parse_failures` counts schema violations among the
/// inputs; `n` is the full case count including them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: Score,
    pub precision: Score,
    pub recall: Score,
    pub n: usize,
    pub parse_failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<ClassMetrics>>,
}

/// Weighting switches. `exclude_class_zero` drops class 0 from the support
/// weights; off by default and recorded in run fingerprints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    #[serde(default)]
    pub exclude_class_zero: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no outcomes to score")]
    EmptyOutcomeSet,
    #[error("no reports to aggregate")]
    EmptyReportSet,
    #[error("outcome {index}: gold label {gold} outside 0..{classes}")]
    GoldOutOfRange { index: usize, gold: u32, classes: u32 },
    #[error("class count {classes} below 2")]
    BadClassCount { classes: u32 },
}

fn ratio(num: usize, den: usize) -> Score {
    if den == 0 {
        0.0
    } else {
        num as Score / den as Score
    }
}

fn f1_from(p: Score, r: Score) -> Score {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check(outcomes: &[EvalOutcome], classes: u32) -> Result<(), MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyOutcomeSet);
    }
    for (index, o) in outcomes.iter().enumerate() {
        if o.gold >= classes {
            return Err(MetricsError::GoldOutOfRange {
                index,
                gold: o.gold,
                classes,
            });
        }
    }
    Ok(())
}

/// Positive-class F1 for binary tasks. Golds must be 0 or 1.
pub fn binary_f1(outcomes: &[EvalOutcome]) -> Result<MetricReport, MetricsError> {
    check(outcomes, 2)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut parse_failures = 0usize;
    for o in outcomes {
        match o.prediction.outcome {
            Outcome::Valid(1) => {
                if o.gold == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            Outcome::Valid(_) => {
                if o.gold == 1 {
                    fn_ += 1;
                }
            }
            Outcome::SchemaViolation(_) => {
                parse_failures += 1;
                if o.gold == 1 {
                    fn_ += 1;
                }
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(MetricReport {
        f1: f1_from(precision, recall),
        precision,
        recall,
        n: outcomes.len(),
        parse_failures,
        per_class: None,
    })
}

/// Support-weighted one-vs-rest F1 over `classes` labels, class 0 included
/// in the weights by default.
pub fn weighted_f1(outcomes: &[EvalOutcome], classes: u32) -> Result<MetricReport, MetricsError> {
    weighted_f1_with(outcomes, classes, MetricOptions::default())
}

pub fn weighted_f1_with(
    outcomes: &[EvalOutcome],
    classes: u32,
    opts: MetricOptions,
) -> Result<MetricReport, MetricsError> {
    if classes < 2 {
        return Err(MetricsError::BadClassCount { classes });
    }
    check(outcomes, classes)?;

    let k = classes as usize;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut parse_failures = 0usize;

    for o in outcomes {
        let g = o.gold as usize;
        support[g] += 1;
        match o.prediction.outcome {
            Outcome::Valid(p) => {
                let p = p as usize;
                if p == g {
                    tp[g] += 1;
                } else {
                    fn_[g] += 1;
                    // A prediction outside the label space indexes no class.
                    if p < k {
                        fp[p] += 1;
                    }
                }
            }
            Outcome::SchemaViolation(_) => {
                parse_failures += 1;
                fn_[g] += 1;
            }
        }
    }

    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let p = ratio(tp[c], tp[c] + fp[c]);
            let r = ratio(tp[c], tp[c] + fn_[c]);
            ClassMetrics {
                class: c as u32,
                precision: p,
                recall: r,
                f1: f1_from(p, r),
                support: support[c],
            }
        })
        .collect();

    let first = usize::from(opts.exclude_class_zero);
    let total: usize = support[first..].iter().sum();
    let weight = |c: usize| ratio(support[c], total);
    let (mut f1, mut precision, mut recall) = (0.0, 0.0, 0.0);
    for (c, m) in per_class.iter().enumerate().skip(first) {
        f1 += weight(c) * m.f1;
        precision += weight(c) * m.precision;
        recall += weight(c) * m.recall;
    }

    Ok(MetricReport {
        f1,
        precision,
        recall,
        n: outcomes.len(),
        parse_failures,
        per_class: Some(per_class),
    })
}

/// Unweighted mean of per-task F1, the AVG row of summary tables.
pub fn aggregate(reports: &[MetricReport]) -> Result<Score, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyReportSet);
    }
    Ok(reports.iter().map(|r| r.f1).sum::<Score>() / reports.len() as Score)
}
