//! Retrieval-based shot selection: an exact cosine top-k index over training
//! sample embeddings, plus assembly of the few-shot prompt.
//!
//! Generic over the vector scalar so wire-format f32 embeddings can be
//! indexed without widening; similarities come back in the same scalar.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guideline::{
    compile_prompt_with_examples, Guideline, GuidelineError, PromptInstance, ShotExample,
};
use crate::numeric::{dot, normalize};

/// Shots per prompt unless configured otherwise.
pub const DEFAULT_SHOT_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord<F> {
    pub sample_id: String,
    pub vector: Vec<F>,
    pub gold_label: u32,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shot<F> {
    pub sample_id: String,
    pub similarity: F,
}

/// Result of a top-k query: shots in non-increasing similarity order, ties
/// broken by ascending sample id, never more than `k` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSelection<F> {
    pub shots: Vec<Shot<F>>,
    pub k: usize,
}

impl<F> ShotSelection<F> {
    /// Zero-shot selection; assembling with it reduces to the plain prompt.
    pub fn empty() -> Self {
        ShotSelection { shots: Vec::new(), k: 0 }
    }
}

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("{at}: dimension {found}, index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize, at: String },
    #[error("duplicate sample_id `{sample_id}`")]
    DuplicateId { sample_id: String },
    #[error("{at}: zero vector cannot be normalized")]
    ZeroVector { at: String },
    #[error("cannot build an empty index")]
    EmptyIndex,
    #[error("selection has {selected} shots but {resolved} resolved examples")]
    UnresolvedShots { selected: usize, resolved: usize },
    #[error("sample `{sample_id}` not present in the index")]
    UnknownSample { sample_id: String },
    #[error("index built with endpoint `{found}`, run requires `{expected}`")]
    EndpointMismatch { expected: String, found: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    endpoint_id: String,
    count: usize,
}

/// Immutable exact-retrieval index. Vectors are unit-normalized at build
/// time; queries are normalized on entry, so similarity is plain dot product.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex<F> {
    endpoint_id: String,
    dim: usize,
    records: Vec<EmbeddingRecord<F>>,
    by_id: BTreeMap<String, usize>,
}

/// Ranks (similarity, id) pairs: higher similarity wins, equal similarity
/// falls back to ascending sample id.
fn rank<F: Float>(sim_a: F, id_a: &str, sim_b: F, id_b: &str) -> Ordering {
    match sim_a.partial_cmp(&sim_b).unwrap_or(Ordering::Equal) {
        Ordering::Equal => id_b.cmp(id_a),
        other => other,
    }
}

impl<F: Float> EmbeddingIndex<F> {
    /// Builds the index, normalizing every vector. `endpoint_id` names the
    /// embedding endpoint that produced the vectors; it travels with the
    /// index so retrieval against foreign query embeddings can be refused.
    pub fn build(
        endpoint_id: &str,
        records: Vec<EmbeddingRecord<F>>,
    ) -> Result<Self, FewshotError> {
        let dim = match records.first() {
            Some(r) => r.vector.len(),
            None => return Err(FewshotError::EmptyIndex),
        };
        let mut by_id = BTreeMap::new();
        let mut stored = Vec::with_capacity(records.len());
        for (idx, mut r) in records.into_iter().enumerate() {
            if r.vector.len() != dim {
                return Err(FewshotError::DimensionMismatch {
                    expected: dim,
                    found: r.vector.len(),
                    at: r.sample_id,
                });
            }
            if !normalize(&mut r.vector) {
                return Err(FewshotError::ZeroVector { at: r.sample_id });
            }
            if by_id.insert(r.sample_id.clone(), idx).is_some() {
                return Err(FewshotError::DuplicateId { sample_id: r.sample_id });
            }
            stored.push(r);
        }
        Ok(EmbeddingIndex {
            endpoint_id: endpoint_id.to_owned(),
            dim,
            records: stored,
            by_id,
        })
    }

    pub fn endpoint_id(&self) -> &str {
        &self.endpoint_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord<F>] {
        &self.records
    }

    pub fn ensure_endpoint(&self, expected: &str) -> Result<(), FewshotError> {
        if self.endpoint_id != expected {
            return Err(FewshotError::EndpointMismatch {
                expected: expected.to_owned(),
                found: self.endpoint_id.clone(),
            });
        }
        Ok(())
    }

    /// Exact top-k by cosine similarity. If the index holds fewer than `k`
    /// records, everything is returned. k-selection runs via
    /// `select_nth_unstable_by`, then only the winning prefix is sorted.
    pub fn select_topk(&self, query: &[F], k: usize) -> Result<ShotSelection<F>, FewshotError> {
        if query.len() != self.dim {
            return Err(FewshotError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
                at: "query".to_owned(),
            });
        }
        let mut unit = query.to_vec();
        if !normalize(&mut unit) {
            return Err(FewshotError::ZeroVector { at: "query".to_owned() });
        }
        if k == 0 {
            return Ok(ShotSelection::empty());
        }
        let sims: Vec<F> = self.records.iter().map(|r| dot(&unit, &r.vector)).collect();
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let better_first = |&a: &usize, &b: &usize| {
            rank(
                sims[b],
                &self.records[b].sample_id,
                sims[a],
                &self.records[a].sample_id,
            )
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, better_first);
            order.truncate(k);
        }
        order.sort_unstable_by(better_first);
        Ok(ShotSelection {
            shots: order
                .into_iter()
                .map(|i| Shot {
                    sample_id: self.records[i].sample_id.clone(),
                    similarity: sims[i],
                })
                .collect(),
            k,
        })
    }

    /// Looks up the content and gold label behind each shot, preserving shot
    /// order.
    pub fn resolve(&self, selection: &ShotSelection<F>) -> Result<Vec<ShotExample>, FewshotError> {
        selection
            .shots
            .iter()
            .map(|shot| {
                let idx = self.by_id.get(&shot.sample_id).ok_or_else(|| {
                    FewshotError::UnknownSample { sample_id: shot.sample_id.clone() }
                })?;
                let r = &self.records[*idx];
                Ok(ShotExample { content: r.content.clone(), label: r.gold_label })
            })
            .collect()
    }
}

impl<F: Float + Serialize> EmbeddingIndex<F> {
    /// Persists as JSON lines: a header with dim, endpoint id, and count,
    /// then one record per line.
    pub fn save(&self, path: &Path) -> Result<(), FewshotError> {
        let mut file = fs::File::create(path)?;
        let header = IndexHeader {
            dim: self.dim,
            endpoint_id: self.endpoint_id.clone(),
            count: self.records.len(),
        };
        writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for r in &self.records {
            writeln!(file, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }
}

impl<F: Float + DeserializeOwned> EmbeddingIndex<F> {
    pub fn load(path: &Path) -> Result<Self, FewshotError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header_line) = lines.next().ok_or(FewshotError::Parse {
            line: 1,
            message: "missing header".to_owned(),
        })?;
        let header: IndexHeader =
            serde_json::from_str(header_line).map_err(|e| FewshotError::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        let mut records = Vec::with_capacity(header.count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let record: EmbeddingRecord<F> =
                serde_json::from_str(line).map_err(|e| FewshotError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            if record.vector.len() != header.dim {
                return Err(FewshotError::DimensionMismatch {
                    expected: header.dim,
                    found: record.vector.len(),
                    at: record.sample_id,
                });
            }
            records.push(record);
        }
        if records.len() != header.count {
            return Err(FewshotError::Parse {
                line: 1,
                message: format!("header count {} but {} records", header.count, records.len()),
            });
        }
        Self::build(&header.endpoint_id, records)
    }
}

/// Compiles the prompt with an Examples section holding the resolved shots in
/// selection order (most similar first). `resolved` must parallel
/// `selection.shots`; a zero-shot selection reduces to the plain prompt.
pub fn assemble_fewshot_prompt<F: Float>(
    g: &Guideline,
    selection: &ShotSelection<F>,
    resolved: &[ShotExample],
    content: &str,
) -> Result<PromptInstance, FewshotError> {
    if resolved.len() != selection.shots.len() {
        return Err(FewshotError::UnresolvedShots {
            selected: selection.shots.len(),
            resolved: resolved.len(),
        });
    }
    Ok(compile_prompt_with_examples(g, resolved, content)?)
}
