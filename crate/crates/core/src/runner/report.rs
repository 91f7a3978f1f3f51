//! Run reports: per-cell scores with failure accounting, plain-text tables
//! (tasks as rows, endpoints as columns, AVG last), lossless machine records,
//! and the similarity/gain join for heatmap rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricReport;
use crate::taxonomy::{relative_gain, task_similarity, TaskRegistry, GAIN_CAP_PERCENT};
use crate::Score;

use super::{RunMode, RunnerError};

/// Scores for one (task, endpoint) pair. The counts satisfy
/// `n = valid + schema_violations + transport_failures`; `metrics` scores the
/// full case set with both failure kinds counted as wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub task_id: String,
    pub endpoint_id: String,
    pub n: usize,
    pub valid: usize,
    pub schema_violations: usize,
    pub transport_failures: usize,
    /// Schema violations by reason code, transport failures excluded.
    pub violation_breakdown: BTreeMap<String, usize>,
    pub metrics: MetricReport,
}

/// Complete scored run. Cells are sorted by (task_id, endpoint_id) and cover
/// the full task × endpoint cross product exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub fingerprint: String,
    pub mode: RunMode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation_tag: Option<String>,
    pub task_ids: Vec<String>,
    pub endpoint_ids: Vec<String>,
    pub cells: Vec<CellReport>,
    /// Unweighted mean F1 per endpoint column, the AVG row.
    pub averages: BTreeMap<String, Score>,
}

impl RunReport {
    pub fn cell(&self, task_id: &str, endpoint_id: &str) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.task_id == task_id && c.endpoint_id == endpoint_id)
    }

    /// True when any cell recorded a transport failure: results exist but
    /// some cases were scored without a model response.
    pub fn is_partial(&self) -> bool {
        self.cells.iter().any(|c| c.transport_failures > 0)
    }

    /// True when no cell got any model response at all.
    pub fn is_total_failure(&self) -> bool {
        !self.cells.is_empty() && self.cells.iter().all(|c| c.transport_failures == c.n)
    }

    fn validate_complete(&self) -> Result<(), RunnerError> {
        let expected = self.task_ids.len() * self.endpoint_ids.len();
        if self.cells.len() != expected {
            return Err(RunnerError::IncompleteReport {
                message: format!("{} cells, expected {expected}", self.cells.len()),
            });
        }
        for task_id in &self.task_ids {
            for endpoint_id in &self.endpoint_ids {
                let found = self
                    .cells
                    .iter()
                    .filter(|c| &c.task_id == task_id && &c.endpoint_id == endpoint_id)
                    .count();
                if found != 1 {
                    return Err(RunnerError::IncompleteReport {
                        message: format!("({task_id}, {endpoint_id}) appears {found} times"),
                    });
                }
            }
        }
        for endpoint_id in &self.endpoint_ids {
            if !self.averages.contains_key(endpoint_id) {
                return Err(RunnerError::IncompleteReport {
                    message: format!("no AVG entry for {endpoint_id}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Human-readable table mirroring the summary-table layout.
    PlainTable,
    /// Lossless JSON, byte-stable for a given report.
    MachineRecord,
}

pub fn emit_report(report: &RunReport, format: ReportFormat) -> Result<String, RunnerError> {
    report.validate_complete()?;
    match format {
        ReportFormat::MachineRecord => {
            let mut out = serde_json::to_string_pretty(report).expect("report serializes");
            out.push('\n');
            Ok(out)
        }
        ReportFormat::PlainTable => Ok(plain_table(report)),
    }
}

fn plain_table(report: &RunReport) -> String {
    let task_width = report
        .task_ids
        .iter()
        .map(|t| t.len())
        .chain(["task_id".len(), "AVG".len()])
        .max()
        .unwrap_or(7);
    let col_width = |endpoint_id: &str| endpoint_id.len().max(5);

    let mut out = String::new();
    let _ = writeln!(out, "run {} fingerprint {}", report.run_id, &report.fingerprint[..12]);
    if let Some(tag) = &report.ablation_tag {
        let _ = writeln!(out, "ablation {tag}");
    }

    let _ = write!(out, "{:<task_width$}", "task_id");
    for e in &report.endpoint_ids {
        let _ = write!(out, " | {:>width$}", e, width = col_width(e));
    }
    out.push('\n');
    let _ = write!(out, "{:-<task_width$}", "");
    for e in &report.endpoint_ids {
        let _ = write!(out, "-+-{:-<width$}", "", width = col_width(e));
    }
    out.push('\n');

    for t in &report.task_ids {
        let _ = write!(out, "{t:<task_width$}");
        for e in &report.endpoint_ids {
            let f1 = report.cell(t, e).expect("validated complete").metrics.f1;
            let _ = write!(out, " | {:>width$.3}", f1, width = col_width(e));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<task_width$}", "AVG");
    for e in &report.endpoint_ids {
        let _ = write!(out, " | {:>width$.3}", report.averages[e], width = col_width(e));
    }
    out.push('\n');
    out
}

/// Long-format CSV joining pairwise task similarity with each evaluation
/// task's relative gain between two endpoint columns, ready for heatmap
/// rendering: task_a, task_b, similarity, baseline/tuned F1 of b, gain.
pub fn gain_table(
    report: &RunReport,
    baseline_endpoint: &str,
    tuned_endpoint: &str,
    registry: &TaskRegistry,
) -> Result<String, RunnerError> {
    report.validate_complete()?;
    for endpoint in [baseline_endpoint, tuned_endpoint] {
        if !report.endpoint_ids.iter().any(|e| e == endpoint) {
            return Err(RunnerError::RegistryMiss {
                kind: "endpoint",
                id: endpoint.to_owned(),
            });
        }
    }
    let tasks: Vec<&str> = report
        .task_ids
        .iter()
        .map(String::as_str)
        .filter(|t| registry.get(t).is_some())
        .collect();

    let mut out = String::from("task_a,task_b,similarity,baseline_f1_b,tuned_f1_b,gain_percent_b\n");
    for a in &tasks {
        for b in &tasks {
            let similarity = task_similarity(registry.get(a).unwrap(), registry.get(b).unwrap())
                .map_err(|e| RunnerError::Config { message: e.to_string() })?;
            let baseline = report.cell(b, baseline_endpoint).unwrap().metrics.f1;
            let tuned = report.cell(b, tuned_endpoint).unwrap().metrics.f1;
            let gain = relative_gain(baseline, tuned, GAIN_CAP_PERCENT);
            let _ = writeln!(
                out,
                "{a},{b},{similarity:.6},{baseline:.3},{tuned:.3},{gain:.1}"
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(f1: Score, n: usize) -> MetricReport {
        MetricReport {
            f1,
            precision: f1,
            recall: f1,
            n,
            parse_failures: 0,
            per_class: None,
        }
    }

    fn cell(task: &str, endpoint: &str, f1: Score) -> CellReport {
        CellReport {
            task_id: task.to_owned(),
            endpoint_id: endpoint.to_owned(),
            n: 10,
            valid: 10,
            schema_violations: 0,
            transport_failures: 0,
            violation_breakdown: BTreeMap::new(),
            metrics: metric(f1, 10),
        }
    }

    fn two_by_two() -> RunReport {
        RunReport {
            run_id: "r1".to_owned(),
            fingerprint: "abcdef0123456789".to_owned(),
            mode: RunMode::ZeroShot,
            seed: 0,
            ablation_tag: None,
            task_ids: vec!["alpha".to_owned(), "beta".to_owned()],
            endpoint_ids: vec!["ep1".to_owned(), "ep2".to_owned()],
            cells: vec![
                cell("alpha", "ep1", 0.4),
                cell("alpha", "ep2", 0.68),
                cell("beta", "ep1", 0.6),
                cell("beta", "ep2", 0.7),
            ],
            averages: [("ep1".to_owned(), 0.5), ("ep2".to_owned(), 0.69)].into(),
        }
    }

    #[test]
    fn plain_table_layout_and_rounding() {
        let table = emit_report(&two_by_two(), ReportFormat::PlainTable).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "run r1 fingerprint abcdef012345");
        assert_eq!(lines[1], "task_id |   ep1 |   ep2");
        assert_eq!(lines[2], "--------+-------+------");
        assert_eq!(lines[3], "alpha   | 0.400 | 0.680");
        assert_eq!(lines[4], "beta    | 0.600 | 0.700");
        assert_eq!(lines[5], "AVG     | 0.500 | 0.690");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn machine_record_round_trips_and_is_stable() {
        let report = two_by_two();
        let a = emit_report(&report, ReportFormat::MachineRecord).unwrap();
        let b = emit_report(&report, ReportFormat::MachineRecord).unwrap();
        assert_eq!(a, b);
        let back: RunReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn incomplete_report_rejected() {
        let mut report = two_by_two();
        report.cells.pop();
        assert!(matches!(
            emit_report(&report, ReportFormat::PlainTable),
            Err(RunnerError::IncompleteReport { .. })
        ));
        let mut dup = two_by_two();
        let extra = dup.cells[0].clone();
        dup.cells[3] = extra;
        assert!(matches!(
            emit_report(&dup, ReportFormat::MachineRecord),
            Err(RunnerError::IncompleteReport { .. })
        ));
    }

    #[test]
    fn partial_and_total_failure_flags() {
        let mut report = two_by_two();
        assert!(!report.is_partial());
        assert!(!report.is_total_failure());
        report.cells[0].transport_failures = 1;
        assert!(report.is_partial());
        for c in &mut report.cells {
            c.transport_failures = c.n;
        }
        assert!(report.is_total_failure());
    }

    #[test]
    fn gain_table_caps_zero_baseline() {
        let registry = TaskRegistry::builtin();
        let task_a = registry.tasks()[0].task_id.clone();
        let task_b = registry.tasks()[1].task_id.clone();
        let mut report = two_by_two();
        report.task_ids = vec![task_a.clone(), task_b.clone()];
        report.cells = vec![
            cell(&task_a, "ep1", 0.0),
            cell(&task_a, "ep2", 0.9),
            cell(&task_b, "ep1", 0.5),
            cell(&task_b, "ep2", 0.25),
        ];
        let csv = gain_table(&report, "ep1", "ep2", &registry).unwrap();
        let row_for = |a: &str, b: &str| {
            csv.lines()
                .find(|l| l.starts_with(&format!("{a},{b},")))
                .unwrap()
                .to_owned()
        };
        let capped = row_for(&task_a, &task_a);
        assert!(capped.ends_with(",0.000,0.900,3000.0"), "{capped}");
        let halved = row_for(&task_a, &task_b);
        assert!(halved.ends_with(",0.500,0.250,-50.0"), "{halved}");
        // Full cross product of the two tasks.
        assert_eq!(csv.lines().count(), 1 + 4);
    }

    #[test]
    fn gain_table_requires_known_endpoint() {
        let registry = TaskRegistry::builtin();
        assert!(matches!(
            gain_table(&two_by_two(), "ep1", "missing", &registry),
            Err(RunnerError::RegistryMiss { .. })
        ));
    }
}
