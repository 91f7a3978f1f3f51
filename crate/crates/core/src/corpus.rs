//! Dataset ingestion, binary conversion of multi-attribute records, seeded
//! sampling, and instruction-tuning export with `Label: y` targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::guideline::{compile_prompt, Guideline};
use crate::label::LabelKind;
use crate::taxonomy::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub content: String,
    pub gold_label: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn new(sample_id: &str, content: &str, gold_label: u32) -> Self {
        Sample {
            sample_id: sample_id.to_owned(),
            content: content.to_owned(),
            gold_label,
            meta: BTreeMap::new(),
        }
    }
}

/// Ordered, immutable set of labeled samples for one task and split.
/// Construction enforces unique sample ids and in-range labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task_id: String,
    pub split: Split,
    pub label_kind: LabelKind,
    samples: Vec<Sample>,
    harmful_ratio: f64,
}

impl LabeledDataset {
    pub fn new(
        task_id: &str,
        split: Split,
        label_kind: LabelKind,
        samples: Vec<Sample>,
    ) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !label_kind.contains(s.gold_label) {
                return Err(CorpusError::LabelOutOfRange {
                    line: 0,
                    label: i64::from(s.gold_label),
                    classes: label_kind.class_count(),
                });
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(CorpusError::DuplicateSampleId { sample_id: s.sample_id.clone() });
            }
        }
        let harmful = samples.iter().filter(|s| s.gold_label != 0).count();
        let harmful_ratio = if samples.is_empty() {
            0.0
        } else {
            harmful as f64 / samples.len() as f64
        };
        Ok(LabeledDataset {
            task_id: task_id.to_owned(),
            split,
            label_kind,
            samples,
            harmful_ratio,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples with a nonzero label. Any positive class counts as
    /// harmful for multi-class tasks.
    pub fn harmful_ratio(&self) -> f64 {
        self.harmful_ratio
    }
}

/// Target for one fine-tuning example: the full compiled prompt and the
/// expected `Label: y` completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    pub task_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Jsonl,
    Csv,
}

/// Names the record fields holding content, label, and (optionally) a stable
/// id. Without an id field, the 1-based data row number is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub content: String,
    pub label: String,
    #[serde(default)]
    pub id: Option<String>,
    /// `None` detects by extension: `.csv`/`.tsv` as CSV, anything else as
    /// JSON lines.
    #[serde(default)]
    pub format: Option<FileFormat>,
}

impl FieldMapping {
    pub fn new(content: &str, label: &str) -> Self {
        FieldMapping {
            content: content.to_owned(),
            label: label.to_owned(),
            id: None,
            format: None,
        }
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.id = Some(id.to_owned());
        self
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    FileError {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: missing or invalid field `{field}`")]
    SchemaError { line: usize, field: String },
    #[error("line {line}: label {label} outside 0..{classes}")]
    LabelOutOfRange { line: usize, label: i64, classes: u32 },
    #[error("duplicate sample_id `{sample_id}`")]
    DuplicateSampleId { sample_id: String },
    #[error("attribute `{attribute}` not in the declared vocabulary")]
    UnknownAttribute { attribute: String },
    #[error("budget {budget} below task count {tasks}")]
    BudgetTooSmall { budget: usize, tasks: usize },
    #[error("task `{task_id}`: sample `{sample_id}` appears in both train and test")]
    SplitOverlap { task_id: String, sample_id: String },
    #[error("duplicate task_id `{task_id}` in sampling input")]
    DuplicateTaskId { task_id: String },
    #[error("guideline `{guideline_id}` label space does not match task `{task_id}`")]
    GuidelineMismatch { task_id: String, guideline_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn detect_format(path: &Path, mapping: &FieldMapping) -> FileFormat {
    if let Some(f) = mapping.format {
        return f;
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("tsv") => FileFormat::Csv,
        _ => FileFormat::Jsonl,
    }
}

/// Reads a labeled file into a dataset. Input order is preserved; labels are
/// range-checked against the task's label space with 1-based line numbers in
/// errors.
pub fn load_dataset(
    path: &Path,
    mapping: &FieldMapping,
    task: &TaskSpec,
    split: Split,
) -> Result<LabeledDataset, CorpusError> {
    let rows = match detect_format(path, mapping) {
        FileFormat::Jsonl => read_jsonl(path, mapping)?,
        FileFormat::Csv => read_csv(path, mapping)?,
    };
    let classes = task.label_kind.class_count();
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        if row.label < 0 || row.label >= i64::from(classes) {
            return Err(CorpusError::LabelOutOfRange {
                line: row.line,
                label: row.label,
                classes,
            });
        }
        let mut meta = BTreeMap::new();
        meta.insert("row".to_owned(), row.line.to_string());
        meta.insert("split".to_owned(), split.as_str().to_owned());
        samples.push(Sample {
            sample_id: row.id,
            content: row.content,
            gold_label: row.label as u32,
            meta,
        });
    }
    LabeledDataset::new(&task.task_id, split, task.label_kind, samples)
}

struct RawRow {
    line: usize,
    id: String,
    content: String,
    label: i64,
}

fn label_from_value(v: &serde_json::Value) -> Option<i64> {
    match v {
        serde_json::Value::Number(n) => n.as_i64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn read_jsonl(path: &Path, mapping: &FieldMapping) -> Result<Vec<RawRow>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::FileError {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw_line).map_err(|_| CorpusError::SchemaError {
                line,
                field: "<record>".to_owned(),
            })?;
        let content = value
            .get(&mapping.content)
            .and_then(|v| v.as_str())
            .ok_or_else(|| CorpusError::SchemaError { line, field: mapping.content.clone() })?
            .to_owned();
        let label = value
            .get(&mapping.label)
            .and_then(label_from_value)
            .ok_or_else(|| CorpusError::SchemaError { line, field: mapping.label.clone() })?;
        let id = match &mapping.id {
            Some(field) => match value.get(field) {
                Some(serde_json::Value::String(s)) => s.clone(),
                Some(serde_json::Value::Number(n)) => n.to_string(),
                _ => return Err(CorpusError::SchemaError { line, field: field.clone() }),
            },
            None => line.to_string(),
        };
        rows.push(RawRow { line, id, content, label });
    }
    Ok(rows)
}

fn read_csv(path: &Path, mapping: &FieldMapping) -> Result<Vec<RawRow>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => {
                CorpusError::FileError { path: path.display().to_string(), source }
            }
            _ => CorpusError::SchemaError { line: 1, field: "<header>".to_owned() },
        })?;
    let headers = reader
        .headers()
        .map_err(|_| CorpusError::SchemaError { line: 1, field: "<header>".to_owned() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let content_col = col(&mapping.content)
        .ok_or_else(|| CorpusError::SchemaError { line: 1, field: mapping.content.clone() })?;
    let label_col = col(&mapping.label)
        .ok_or_else(|| CorpusError::SchemaError { line: 1, field: mapping.label.clone() })?;
    let id_col = match &mapping.id {
        Some(field) => Some(
            col(field)
                .ok_or_else(|| CorpusError::SchemaError { line: 1, field: field.clone() })?,
        ),
        None => None,
    };

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        // Header occupies line 1, so data starts at line 2.
        let line = idx + 2;
        let record = record.map_err(|_| CorpusError::SchemaError {
            line,
            field: "<record>".to_owned(),
        })?;
        let content = record
            .get(content_col)
            .ok_or_else(|| CorpusError::SchemaError { line, field: mapping.content.clone() })?
            .to_owned();
        let label = record
            .get(label_col)
            .and_then(|s| s.trim().parse::<i64>().ok())
            .ok_or_else(|| CorpusError::SchemaError { line, field: mapping.label.clone() })?;
        let id = match id_col {
            Some(c) => record
                .get(c)
                .ok_or_else(|| CorpusError::SchemaError {
                    line,
                    field: mapping.id.clone().unwrap(),
                })?
                .to_owned(),
            None => line.to_string(),
        };
        rows.push(RawRow { line, id, content, label });
    }
    Ok(rows)
}

/// Fails if any sample id appears in both splits of the same task.
pub fn check_split_disjoint(
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(), CorpusError> {
    let train_ids: BTreeSet<&str> = train.samples().iter().map(|s| s.sample_id.as_str()).collect();
    for s in test.samples() {
        if train_ids.contains(s.sample_id.as_str()) {
            return Err(CorpusError::SplitOverlap {
                task_id: train.task_id.clone(),
                sample_id: s.sample_id.clone(),
            });
        }
    }
    Ok(())
}

/// Source record carrying a set of harm attributes instead of a single label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiAttributeRecord {
    pub content: String,
    pub attributes: BTreeSet<String>,
}

impl MultiAttributeRecord {
    pub fn new(content: &str, attributes: &[&str]) -> Self {
        MultiAttributeRecord {
            content: content.to_owned(),
            attributes: attributes.iter().map(|a| (*a).to_owned()).collect(),
        }
    }
}

/// Converts multi-attribute records into the binary dataset for one
/// attribute: label 1 iff the record carries it. Content is preserved
/// verbatim; the task id is `{dataset}/{attribute}`.
pub fn binarize_multitask(
    records: &[MultiAttributeRecord],
    attribute: &str,
    vocabulary: &BTreeSet<String>,
    dataset: &str,
    split: Split,
) -> Result<LabeledDataset, CorpusError> {
    if !vocabulary.contains(attribute) {
        return Err(CorpusError::UnknownAttribute { attribute: attribute.to_owned() });
    }
    for r in records {
        if let Some(unknown) = r.attributes.iter().find(|a| !vocabulary.contains(*a)) {
            return Err(CorpusError::UnknownAttribute { attribute: unknown.clone() });
        }
    }
    let samples = records
        .iter()
        .enumerate()
        .map(|(idx, r)| Sample {
            sample_id: (idx + 1).to_string(),
            content: r.content.clone(),
            gold_label: u32::from(r.attributes.contains(attribute)),
            meta: BTreeMap::new(),
        })
        .collect();
    LabeledDataset::new(&format!("{dataset}/{attribute}"), split, LabelKind::Binary, samples)
}

/// One binary dataset per vocabulary attribute, in sorted attribute order.
pub fn binarize_all(
    records: &[MultiAttributeRecord],
    vocabulary: &BTreeSet<String>,
    dataset: &str,
    split: Split,
) -> Result<Vec<LabeledDataset>, CorpusError> {
    vocabulary
        .iter()
        .map(|attr| binarize_multitask(records, attr, vocabulary, dataset, split))
        .collect()
}

/// RNG for one (seed, task, split) cell: ChaCha20 keyed by SHA-256 over the
/// run seed (8 bytes little-endian), the task id, and the split tag. The
/// construction is stated here so selections can be reproduced outside this
/// crate.
pub fn derive_rng(seed: u64, task_id: &str, split: Split) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(task_id.as_bytes());
    hasher.update(b"/");
    hasher.update(split.as_str().as_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Uniform sample of `n` entries without replacement, preserving original
/// relative order. `n >= len` returns the dataset unchanged. Selection
/// depends only on (seed, task_id, split, len, n), so it is stable across
/// runs and unaffected by other datasets.
pub fn sample_fixed(dataset: &LabeledDataset, n: usize, seed: u64) -> LabeledDataset {
    if n >= dataset.len() {
        return dataset.clone();
    }
    let mut rng = derive_rng(seed, &dataset.task_id, dataset.split);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    // Partial Fisher-Yates: after i steps the prefix is a uniform draw.
    for i in 0..n {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen = indices[..n].to_vec();
    chosen.sort_unstable();
    let samples = chosen.iter().map(|&i| dataset.samples[i].clone()).collect();
    LabeledDataset {
        task_id: dataset.task_id.clone(),
        split: dataset.split,
        label_kind: dataset.label_kind,
        samples,
        harmful_ratio: 0.0,
    }
    .recompute_ratio()
}

impl LabeledDataset {
    fn recompute_ratio(mut self) -> Self {
        let harmful = self.samples.iter().filter(|s| s.gold_label != 0).count();
        self.harmful_ratio = if self.samples.is_empty() {
            0.0
        } else {
            harmful as f64 / self.samples.len() as f64
        };
        self
    }
}

/// Draws each task toward an equal share of `total_budget`: quota is
/// floor(budget/T), with the remainder going to the first (budget mod T)
/// tasks in task_id order. Tasks smaller than their quota contribute all
/// their samples; the shortfall is not redistributed.
pub fn strategic_sample(
    datasets: &[LabeledDataset],
    total_budget: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>, CorpusError> {
    let t = datasets.len();
    if total_budget < t || t == 0 {
        return Err(CorpusError::BudgetTooSmall { budget: total_budget, tasks: t });
    }
    let mut ids: Vec<&str> = datasets.iter().map(|d| d.task_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        let dup = ids.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
        return Err(CorpusError::DuplicateTaskId { task_id: dup.to_owned() });
    }
    let base = total_budget / t;
    let remainder = total_budget % t;
    let quota_of = |task_id: &str| {
        let rank = ids.binary_search(&task_id).unwrap();
        base + usize::from(rank < remainder)
    };
    Ok(datasets
        .iter()
        .map(|d| sample_fixed(d, quota_of(&d.task_id), seed))
        .collect())
}

/// Renders every sample as (compiled prompt, `Label: y`) in input order. The
/// guideline's label space must match the dataset's.
pub fn export_training_records(
    dataset: &LabeledDataset,
    g: &Guideline,
) -> Result<Vec<TrainingRecord>, CorpusError> {
    if g.label_kind != dataset.label_kind {
        return Err(CorpusError::GuidelineMismatch {
            task_id: dataset.task_id.clone(),
            guideline_id: g.guideline_id.clone(),
        });
    }
    dataset
        .samples()
        .iter()
        .map(|s| {
            let prompt = compile_prompt(g, &s.content).map_err(|_| {
                CorpusError::GuidelineMismatch {
                    task_id: dataset.task_id.clone(),
                    guideline_id: g.guideline_id.clone(),
                }
            })?;
            Ok(TrainingRecord {
                prompt_text: prompt.text,
                target_text: format!("Label: {}", s.gold_label),
                task_id: dataset.task_id.clone(),
            })
        })
        .collect()
}

/// Writes training records as JSON lines with fields prompt, target, task_id.
pub fn write_training_jsonl(records: &[TrainingRecord], path: &Path) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Fine-tuning hyperparameters: one epoch at batch size 96, learning rate
/// 1e-4 with warm-up ratio 0.03, adapter rank 64 with scaling 16 and dropout
/// 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub lora_rank: u32,
    pub lora_scaling: u32,
    pub lora_dropout: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 1,
            batch_size: 96,
            learning_rate: 1e-4,
            warmup_ratio: 0.03,
            lora_rank: 64,
            lora_scaling: 16,
            lora_dropout: 0.05,
        }
    }
}

/// The fixed fine-tuning configuration as a TOML document.
pub fn emit_training_config() -> String {
    toml::to_string_pretty(&TrainingConfig::default()).expect("config serializes")
}
