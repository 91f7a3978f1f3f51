//! Guideline definitions and deterministic prompt compilation.
//!
//! A guideline is an ordered set of labeled category definitions. The
//! compiler renders the five-section classification prompt (title,
//! definitions, key points, content, evaluation) byte-identically for a given
//! (guideline, content) pair, and records where each template header was
//! emitted so content that echoes header strings cannot be confused with
//! template structure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::label::LabelKind;
use crate::modelclient::{ClientError, TextCompletion};

/// One labeled category inside a guideline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDefinition {
    pub label_index: u32,
    pub name: String,
    pub definition_text: String,
}

impl CategoryDefinition {
    pub fn new(label_index: u32, name: &str, definition_text: &str) -> Self {
        CategoryDefinition {
            label_index,
            name: name.to_owned(),
            definition_text: definition_text.to_owned(),
        }
    }
}

/// A complete guideline: contiguous label indices starting at 0, one
/// definition per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    pub guideline_id: String,
    pub title: String,
    pub label_kind: LabelKind,
    pub definitions: Vec<CategoryDefinition>,
    /// Noun in the "Definitions of ..." header.
    #[serde(default = "default_subject")]
    pub definitions_subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation_notes: Option<String>,
}

fn default_subject() -> String {
    "Categories".to_owned()
}

impl Guideline {
    /// Binary guideline: label 0 is the compliant class, label 1 violating.
    pub fn binary(
        guideline_id: &str,
        title: &str,
        compliant: CategoryDefinition,
        violating: CategoryDefinition,
    ) -> Self {
        Guideline {
            guideline_id: guideline_id.to_owned(),
            title: title.to_owned(),
            label_kind: LabelKind::Binary,
            definitions: vec![compliant, violating],
            definitions_subject: default_subject(),
            evaluation_notes: None,
        }
    }

    pub fn load_toml(path: &Path) -> Result<Self, GuidelineError> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| GuidelineError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save_toml(&self, path: &Path) -> Result<(), GuidelineError> {
        let text = toml::to_string_pretty(self).expect("guideline serializes");
        fs::write(path, text)?;
        Ok(())
    }

    /// Digest over the serialized guideline; feeds run fingerprints.
    pub fn content_digest(&self) -> String {
        let json = serde_json::to_string(self).expect("guideline serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Machine-readable structural problems found by [`validate_guideline`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidelineViolation {
    DefinitionCountMismatch { expected: u32, found: u32 },
    DuplicateLabelIndex { label_index: u32 },
    MissingLabelIndex { label_index: u32 },
    LabelIndexOutOfRange { label_index: u32 },
    EmptyTitle,
    EmptyName { label_index: u32 },
    EmptyDefinitionText { label_index: u32 },
    /// A definition named like a none/safe class sits at a nonzero index.
    NoneClassNotFirst { label_index: u32 },
}

/// Structural check; returns every violation found and never errors.
pub fn validate_guideline(g: &Guideline) -> Vec<GuidelineViolation> {
    let mut out = Vec::new();
    let expected = g.label_kind.class_count();
    if g.definitions.len() as u32 != expected {
        out.push(GuidelineViolation::DefinitionCountMismatch {
            expected,
            found: g.definitions.len() as u32,
        });
    }
    if g.title.trim().is_empty() {
        out.push(GuidelineViolation::EmptyTitle);
    }
    let mut seen = BTreeMap::new();
    for d in &g.definitions {
        *seen.entry(d.label_index).or_insert(0u32) += 1;
        if d.label_index >= expected {
            out.push(GuidelineViolation::LabelIndexOutOfRange {
                label_index: d.label_index,
            });
        }
        if d.name.trim().is_empty() {
            out.push(GuidelineViolation::EmptyName {
                label_index: d.label_index,
            });
        }
        if d.definition_text.trim().is_empty() {
            out.push(GuidelineViolation::EmptyDefinitionText {
                label_index: d.label_index,
            });
        }
        let lowered = d.name.trim().to_lowercase();
        if d.label_index != 0 && (lowered == "none" || lowered == "safe") {
            out.push(GuidelineViolation::NoneClassNotFirst {
                label_index: d.label_index,
            });
        }
    }
    for (&idx, &count) in &seen {
        if count > 1 {
            out.push(GuidelineViolation::DuplicateLabelIndex { label_index: idx });
        }
    }
    for idx in 0..expected {
        if !seen.contains_key(&idx) {
            out.push(GuidelineViolation::MissingLabelIndex { label_index: idx });
        }
    }
    out
}

/// Template sections in emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectionKind {
    Title,
    Definitions,
    KeyPoints,
    Examples,
    Content,
    Evaluation,
}

/// Byte offset at which the compiler emitted a section header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub kind: SectionKind,
    pub offset: usize,
}

/// A compiled prompt. `sections` indexes compiler-emitted headers only, so
/// header strings echoed inside the reviewed content are distinguishable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub text: String,
    pub guideline_id: String,
    pub content_hash: String,
    pub sections: Vec<Section>,
}

impl PromptInstance {
    pub fn section_offset(&self, kind: SectionKind) -> Option<usize> {
        self.sections.iter().find(|s| s.kind == kind).map(|s| s.offset)
    }
}

/// One retrieved exemplar for few-shot prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotExample {
    pub content: String,
    pub label: u32,
}

#[derive(Debug, Error)]
pub enum GuidelineError {
    #[error("content is empty")]
    EmptyContent,
    #[error("invalid guideline `{guideline_id}`: {violations:?}")]
    InvalidGuideline {
        guideline_id: String,
        violations: Vec<GuidelineViolation>,
    },
    #[error("definition endpoint failed: {0}")]
    EndpointError(#[from] ClientError),
    #[error("definition completion was empty")]
    EmptyCompletion,
    #[error("category name is empty")]
    EmptyCategoryName,
    #[error("exemplar list is empty")]
    EmptyExemplars,
    #[error("guideline config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stable digest of reviewed content (SHA-256 hex).
pub fn content_hash(content: &str) -> String {
    hex::encode(Sha256::digest(content.as_bytes()))
}

/// Compiles the five-section zero-shot prompt. Deterministic: the same
/// (guideline, content) pair always yields identical bytes.
pub fn compile_prompt(g: &Guideline, content: &str) -> Result<PromptInstance, GuidelineError> {
    compile_prompt_with_examples(g, &[], content)
}

/// Few-shot variant: a sixth `Examples` section between key points and
/// content. An empty example list compiles byte-identically to
/// [`compile_prompt`].
pub fn compile_prompt_with_examples(
    g: &Guideline,
    examples: &[ShotExample],
    content: &str,
) -> Result<PromptInstance, GuidelineError> {
    if content.trim().is_empty() {
        return Err(GuidelineError::EmptyContent);
    }
    let violations = validate_guideline(g);
    if !violations.is_empty() {
        return Err(GuidelineError::InvalidGuideline {
            guideline_id: g.guideline_id.clone(),
            violations,
        });
    }

    let mut defs: Vec<&CategoryDefinition> = g.definitions.iter().collect();
    defs.sort_by_key(|d| d.label_index);
    let k = defs.len();
    let first_name = &defs[0].name;

    let mut text = String::new();
    let mut sections = Vec::new();
    let mark = |sections: &mut Vec<Section>, text: &String, kind: SectionKind| {
        sections.push(Section {
            kind,
            offset: text.len(),
        });
    };

    mark(&mut sections, &text, SectionKind::Title);
    text.push_str(&g.title);
    text.push_str("\n\n");
    text.push_str(&format!(
        "Your goal is to classify content according to the {k} categories defined below. \
         Only one category should be labeled for each content.\n\n"
    ));

    mark(&mut sections, &text, SectionKind::Definitions);
    text.push_str(&format!("Definitions of {}\n\n", g.definitions_subject));
    for d in &defs {
        text.push_str(&format!(
            "- {} (Label: {}). {}\n",
            d.name, d.label_index, d.definition_text
        ));
    }
    text.push('\n');

    mark(&mut sections, &text, SectionKind::KeyPoints);
    text.push_str("Key Points to Consider\n\n");
    text.push_str(&format!(
        "1. Understanding the Categories: Familiarize yourself with the definitions of \
         the {k} categories. Understand what each category represents and the kind of \
         content it covers.\n\n"
    ));
    text.push_str(
        "2. Single Category Labeling: Even if a content can be associated with multiple \
         categories, only one category should be labeled for each content. Choose the \
         most prominent or harmful category.\n\n",
    );
    text.push_str(
        "3. Input Format: The content to be classified is located after \"Content\". \
         This is the specific content that you should focus on for classification \
         purposes.\n\n",
    );
    text.push_str(&format!(
        "4. Output Format: Begin your classification response with the term \"Label: \", \
         followed by the index number of the category. Index numbering is indicated in \
         the parentheses and starts from 0. For instance, if the content is classified \
         under the category \"{first_name} (Label: 0)\", your response should be \
         \"Label: 0\".\n\n"
    ));
    if let Some(notes) = &g.evaluation_notes {
        text.push_str(notes);
        text.push_str("\n\n");
    }

    if !examples.is_empty() {
        mark(&mut sections, &text, SectionKind::Examples);
        text.push_str("Examples\n\n");
        for ex in examples {
            text.push_str(&ex.content);
            text.push_str(&format!("\nLabel: {}\n\n", ex.label));
        }
    }

    mark(&mut sections, &text, SectionKind::Content);
    text.push_str("Content\n\n");
    text.push_str(content);
    text.push_str("\n\n");

    mark(&mut sections, &text, SectionKind::Evaluation);
    text.push_str("Evaluation\n");

    Ok(PromptInstance {
        text,
        guideline_id: g.guideline_id.clone(),
        content_hash: content_hash(content),
        sections,
    })
}

/// Writes the prompt text under `dir` as one file per
/// (guideline_id, content_hash); returns the path.
pub fn dump_prompt(dir: &Path, prompt: &PromptInstance) -> Result<PathBuf, GuidelineError> {
    fs::create_dir_all(dir)?;
    let safe_id: String = prompt
        .guideline_id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    let path = dir.join(format!("{safe_id}__{}.txt", prompt.content_hash));
    fs::write(&path, &prompt.text)?;
    Ok(path)
}

/// LLM-backed definition writer with a content-addressed cache keyed by
/// (category name, exemplar digest, endpoint id). Repeat calls for the same
/// key reuse the committed completion; concurrent duplicates are permitted
/// and the first committed value wins.
#[derive(Default)]
pub struct DefinitionGenerator {
    cache: Mutex<BTreeMap<String, String>>,
}

impl DefinitionGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn generate(
        &self,
        llm: &dyn TextCompletion,
        category_name: &str,
        exemplars: &[(String, String)],
    ) -> Result<String, GuidelineError> {
        if category_name.trim().is_empty() {
            return Err(GuidelineError::EmptyCategoryName);
        }
        if exemplars.is_empty() {
            return Err(GuidelineError::EmptyExemplars);
        }

        let key = cache_key(category_name, exemplars, llm.endpoint_id());
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }

        let prompt = generation_prompt(category_name, exemplars);
        let response = llm.complete_text(&prompt)?;
        let definition = response.raw_text.trim().to_owned();
        if definition.is_empty() {
            return Err(GuidelineError::EmptyCompletion);
        }

        let mut cache = self.cache.lock().unwrap();
        Ok(cache.entry(key).or_insert(definition).clone())
    }
}

fn cache_key(category_name: &str, exemplars: &[(String, String)], endpoint_id: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(category_name.as_bytes());
    hasher.update([0]);
    hasher.update(exemplar_digest(exemplars).as_bytes());
    hasher.update([0]);
    hasher.update(endpoint_id.as_bytes());
    hex::encode(hasher.finalize())
}

fn exemplar_digest(exemplars: &[(String, String)]) -> String {
    let mut hasher = Sha256::new();
    for (name, def) in exemplars {
        hasher.update(name.as_bytes());
        hasher.update([1]);
        hasher.update(def.as_bytes());
        hasher.update([2]);
    }
    hex::encode(hasher.finalize())
}

fn generation_prompt(category_name: &str, exemplars: &[(String, String)]) -> String {
    let mut p = String::from(
        "Write the definition of an undesired content category for a content \
         moderation guideline.\n\n",
    );
    for (name, def) in exemplars {
        p.push_str(&format!("Category: {name}\nDefinition: {def}\n\n"));
    }
    p.push_str(&format!("Category: {category_name}\nDefinition:"));
    p
}

/// Three-target sample guideline used by tests and demos: a "None" class at
/// label 0 plus two hate-target classes.
pub fn hate_target_sample() -> Guideline {
    Guideline {
        guideline_id: "hate-targets".to_owned(),
        title: "Hate Speech Target Classification Guidelines".to_owned(),
        label_kind: LabelKind::MultiClass { classes: 3 },
        definitions: vec![
            CategoryDefinition {
                label_index: 0,
                name: "None".to_owned(),
                definition_text: "No hateful content is present, so no target applies."
                    .to_owned(),
            },
            CategoryDefinition {
                label_index: 1,
                name: "Financial Powers".to_owned(),
                definition_text: "Hostility directed at wealthy individuals, large \
                                  companies, or financial institutions."
                    .to_owned(),
            },
            CategoryDefinition {
                label_index: 2,
                name: "Political Issues".to_owned(),
                definition_text: "Hostility directed at governments, parties, \
                                  politicians, or political movements."
                    .to_owned(),
            },
        ],
        definitions_subject: "Targets".to_owned(),
        evaluation_notes: None,
    }
}
