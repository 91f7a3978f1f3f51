//! Harm taxonomy, task registry, and mark-vector similarity.
//!
//! Tasks carry marks over eight harm subcategories. Marks become 8-bit binary
//! vectors; cosine over those vectors is the task-similarity measure used for
//! transfer analysis, with [`relative_gain`] capping runaway percentages.

pub mod catalog;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::LabelKind;
use crate::numeric;
use crate::Score;

/// Cap applied to [`relative_gain`] percentages in gain tables.
pub const GAIN_CAP_PERCENT: Score = 3000.0;

/// The four top-level harm areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryCategory {
    MaliciousActions,
    DiscriminationExclusionToxicity,
    InformationHazards,
    MisinformationHarms,
}

/// The eight harm subcategories, in fixed declaration order. This order is
/// the coordinate order of every [`SubcategoryVector`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Subcategory {
    IllegalActivities,
    UnethicalOrUnsafeActions,
    SocialStereotypeAndUnfairDiscrimination,
    ToxicLanguageHateSpeech,
    AdultContent,
    PrivateInformation,
    DisseminateFalseOrMisleadingInformation,
    CausingMaterialHarmByDisseminatingUnverifiedInformation,
}

impl Subcategory {
    /// All subcategories in coordinate order.
    pub const ALL: [Subcategory; 8] = [
        Subcategory::IllegalActivities,
        Subcategory::UnethicalOrUnsafeActions,
        Subcategory::SocialStereotypeAndUnfairDiscrimination,
        Subcategory::ToxicLanguageHateSpeech,
        Subcategory::AdultContent,
        Subcategory::PrivateInformation,
        Subcategory::DisseminateFalseOrMisleadingInformation,
        Subcategory::CausingMaterialHarmByDisseminatingUnverifiedInformation,
    ];

    /// Coordinate index inside mark vectors.
    pub fn bit(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Top-level harm area this subcategory belongs to.
    pub fn parent(self) -> PrimaryCategory {
        use Subcategory::*;
        match self {
            IllegalActivities | UnethicalOrUnsafeActions => PrimaryCategory::MaliciousActions,
            SocialStereotypeAndUnfairDiscrimination
            | ToxicLanguageHateSpeech
            | AdultContent => PrimaryCategory::DiscriminationExclusionToxicity,
            PrivateInformation => PrimaryCategory::InformationHazards,
            DisseminateFalseOrMisleadingInformation
            | CausingMaterialHarmByDisseminatingUnverifiedInformation => {
                PrimaryCategory::MisinformationHarms
            }
        }
    }

    /// Stable snake_case identifier (the serialized form).
    pub fn id(self) -> &'static str {
        use Subcategory::*;
        match self {
            IllegalActivities => "illegal_activities",
            UnethicalOrUnsafeActions => "unethical_or_unsafe_actions",
            SocialStereotypeAndUnfairDiscrimination => {
                "social_stereotype_and_unfair_discrimination"
            }
            ToxicLanguageHateSpeech => "toxic_language_hate_speech",
            AdultContent => "adult_content",
            PrivateInformation => "private_information",
            DisseminateFalseOrMisleadingInformation => {
                "disseminate_false_or_misleading_information"
            }
            CausingMaterialHarmByDisseminatingUnverifiedInformation => {
                "causing_material_harm_by_disseminating_unverified_information"
            }
        }
    }
}

impl fmt::Display for Subcategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Whether a task's data family was seen during tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    InDistribution,
    OutOfDistribution,
}

/// One moderation task: label space, taxonomy marks, distribution status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub dataset_id: String,
    pub label_kind: LabelKind,
    #[serde(rename = "marks")]
    pub subcategory_marks: BTreeSet<Subcategory>,
    pub distribution: Distribution,
    #[serde(default = "default_language")]
    pub language_tag: String,
}

fn default_language() -> String {
    "en".to_owned()
}

/// 8-bit binary mark vector in [`Subcategory::ALL`] coordinate order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubcategoryVector([u8; 8]);

impl SubcategoryVector {
    pub fn from_marks(marks: &BTreeSet<Subcategory>) -> Self {
        let mut bits = [0u8; 8];
        for &m in marks {
            bits[m.bit()] = 1;
        }
        SubcategoryVector(bits)
    }

    /// Builds from a bitmask where bit `i` is coordinate `i`.
    pub fn from_mask(mask: u8) -> Self {
        let mut bits = [0u8; 8];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = (mask >> i) & 1;
        }
        SubcategoryVector(bits)
    }

    pub fn bits(&self) -> &[u8; 8] {
        &self.0
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|&b| u32::from(b)).sum()
    }

    fn as_scores(&self) -> [Score; 8] {
        let mut v = [0.0; 8];
        for (i, &b) in self.0.iter().enumerate() {
            v[i] = Score::from(b);
        }
        v
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("task `{task_id}` has no subcategory marks")]
    EmptyMarks { task_id: String },
    #[error("zero-norm mark vector for task `{task_id}`")]
    ZeroNorm { task_id: String },
    #[error("duplicate task_id `{task_id}` in registry")]
    DuplicateTaskId { task_id: String },
    #[error("registry line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mark vector of `task`. Errors when the task carries no marks.
pub fn subcategory_vector(task: &TaskSpec) -> Result<SubcategoryVector, TaxonomyError> {
    if task.subcategory_marks.is_empty() {
        return Err(TaxonomyError::EmptyMarks {
            task_id: task.task_id.clone(),
        });
    }
    Ok(SubcategoryVector::from_marks(&task.subcategory_marks))
}

/// Cosine similarity of two mark vectors; `None` when either has zero norm.
pub fn mark_similarity(a: SubcategoryVector, b: SubcategoryVector) -> Option<Score> {
    numeric::cosine(&a.as_scores(), &b.as_scores())
}

/// Cosine similarity of the tasks' mark vectors, in double precision.
pub fn task_similarity(a: &TaskSpec, b: &TaskSpec) -> Result<Score, TaxonomyError> {
    let va = SubcategoryVector::from_marks(&a.subcategory_marks);
    let vb = SubcategoryVector::from_marks(&b.subcategory_marks);
    if va.count_ones() == 0 {
        return Err(TaxonomyError::ZeroNorm {
            task_id: a.task_id.clone(),
        });
    }
    if vb.count_ones() == 0 {
        return Err(TaxonomyError::ZeroNorm {
            task_id: b.task_id.clone(),
        });
    }
    Ok(mark_similarity(va, vb).expect("nonzero vectors have a cosine"))
}

/// Dense pairwise similarity over a task list, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub task_ids: Vec<String>,
    pub values: Vec<Vec<Score>>,
}

impl SimilarityMatrix {
    pub fn value(&self, i: usize, j: usize) -> Score {
        self.values[i][j]
    }

    /// CSV with a task_id header row and column, entries at six decimals.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("task_id");
        for id in &self.task_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.task_ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.task_ids.len() {
                out.push_str(&format!(",{:.6}", self.values[i][j]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TaxonomyError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

/// Pairwise [`task_similarity`] over `tasks`. Symmetric with a unit diagonal.
pub fn similarity_matrix(tasks: &[TaskSpec]) -> Result<SimilarityMatrix, TaxonomyError> {
    let n = tasks.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = task_similarity(&tasks[i], &tasks[j])?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
        values,
    })
}

/// Percentage gain of `tuned` over `baseline`, capped at `cap_percent`.
/// A zero baseline reports the cap rather than an undefined ratio.
pub fn relative_gain(baseline: Score, tuned: Score, cap_percent: Score) -> Score {
    if baseline == 0.0 {
        return cap_percent;
    }
    // Ratio before scaling: (0 - b) / b is exactly -1, so a zero tuned score
    // yields exactly -100 with no rounding below it.
    let raw = 100.0 * ((tuned - baseline) / baseline);
    raw.min(cap_percent)
}

/// Task collection with unique ids and non-empty marks, enforced at build.
#[derive(Debug, Clone)]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self, TaxonomyError> {
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if t.subcategory_marks.is_empty() {
                return Err(TaxonomyError::EmptyMarks {
                    task_id: t.task_id.clone(),
                });
            }
            if !seen.insert(t.task_id.clone()) {
                return Err(TaxonomyError::DuplicateTaskId {
                    task_id: t.task_id.clone(),
                });
            }
        }
        Ok(TaskRegistry { tasks })
    }

    /// The built-in registry transcribed from the taxonomy analysis tables.
    pub fn builtin() -> Self {
        TaskRegistry::new(catalog::tasks()).expect("builtin registry is valid")
    }

    /// Reads a line-delimited registry file (one JSON task record per line).
    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let f = fs::File::open(path)?;
        let mut tasks = Vec::new();
        for (idx, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let task: TaskSpec =
                serde_json::from_str(&line).map_err(|e| TaxonomyError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            tasks.push(task);
        }
        TaskRegistry::new(tasks)
    }

    pub fn save(&self, path: &Path) -> Result<(), TaxonomyError> {
        let mut f = fs::File::create(path)?;
        for t in &self.tasks {
            let line = serde_json::to_string(t).expect("task serializes");
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
