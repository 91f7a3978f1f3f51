//! Run orchestration: resolves config against task/endpoint registries,
//! drives every (task, endpoint, sample) through prompt compilation, cached
//! completion, parsing, and scoring with a bounded worker pool, and assembles
//! reproducible reports.

pub mod cache;
pub mod config;
pub mod report;

pub use cache::ResponseCache;
pub use report::{emit_report, gain_table, CellReport, ReportFormat, RunReport};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{export_training_records, CorpusError, LabeledDataset, TrainingRecord};
use crate::fewshot::{assemble_fewshot_prompt, EmbeddingIndex};
use crate::guideline::{compile_prompt, validate_guideline, Guideline, PromptInstance};
use crate::label::LabelKind;
use crate::metrics::{
    aggregate, binary_f1, weighted_f1_with, EvalOutcome, MetricOptions, MetricsError,
};
use crate::modelclient::{EndpointClient, EndpointKind, ThresholdBoundary};
use crate::parsing::{parse_label, parse_label_with, Outcome, ParserOptions, ViolationReason};
use crate::taxonomy::TaskSpec;

/// Upper bound on configured parallelism.
pub const MAX_PARALLELISM: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    ZeroShot,
    FewShot {
        k: usize,
    },
}

/// Behavior switches that change scoring or parsing. All are part of the run
/// fingerprint, so reported numbers can never silently drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSwitches {
    /// Accept `label:`/`LABEL:` in addition to `Label:`.
    #[serde(default)]
    pub case_insensitive_labels: bool,
    /// Drop class 0 from support weighting in multi-class F1.
    #[serde(default)]
    pub exclude_class_zero: bool,
    /// Moderation-score binarization threshold.
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    /// Whether a score equal to the threshold maps to 1.
    #[serde(default)]
    pub threshold_boundary: ThresholdBoundary,
}

fn d_threshold() -> f64 {
    0.5
}

impl Default for RunSwitches {
    fn default() -> Self {
        RunSwitches {
            case_insensitive_labels: false,
            exclude_class_zero: false,
            threshold: 0.5,
            threshold_boundary: ThresholdBoundary::Inclusive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub tasks: Vec<String>,
    pub endpoints: Vec<String>,
    #[serde(default)]
    pub mode: RunMode,
    /// Embedding endpoint id, required in few-shot mode.
    #[serde(default)]
    pub embedding_endpoint: Option<String>,
    #[serde(default = "d_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub switches: RunSwitches,
}

fn d_parallelism() -> usize {
    1
}

impl RunConfig {
    pub fn new(run_id: &str, tasks: &[&str], endpoints: &[&str]) -> Self {
        RunConfig {
            run_id: run_id.to_owned(),
            tasks: tasks.iter().map(|t| (*t).to_owned()).collect(),
            endpoints: endpoints.iter().map(|e| (*e).to_owned()).collect(),
            mode: RunMode::ZeroShot,
            embedding_endpoint: None,
            parallelism: 1,
            seed: 0,
            switches: RunSwitches::default(),
        }
    }

    fn validate(&self) -> Result<(), RunnerError> {
        if self.tasks.is_empty() {
            return Err(config_err("no tasks selected"));
        }
        if self.endpoints.is_empty() {
            return Err(config_err("no endpoints selected"));
        }
        let unique = |ids: &[String]| ids.iter().collect::<BTreeSet<_>>().len() == ids.len();
        if !unique(&self.tasks) {
            return Err(config_err("duplicate task ids in run config"));
        }
        if !unique(&self.endpoints) {
            return Err(config_err("duplicate endpoint ids in run config"));
        }
        if self.parallelism == 0 || self.parallelism > MAX_PARALLELISM {
            return Err(config_err(&format!(
                "parallelism {} outside 1..={MAX_PARALLELISM}",
                self.parallelism
            )));
        }
        if let RunMode::FewShot { k } = self.mode {
            if k == 0 {
                return Err(config_err("few-shot k must be >= 1"));
            }
            if self.embedding_endpoint.is_none() {
                return Err(config_err("few-shot mode requires an embedding endpoint"));
            }
        }
        Ok(())
    }
}

/// Everything the runner needs for one task: its registry entry, the guideline that
/// compiles its prompts, the evaluation samples, and optionally a training
/// split for export.
pub struct TaskBundle {
    pub task: TaskSpec,
    pub guideline: Guideline,
    pub dataset: LabeledDataset,
    pub train: Option<LabeledDataset>,
}

/// One exclusion experiment: a tag for the report and the set of task ids
/// whose training data is withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub tag: String,
    pub exclude: BTreeSet<String>,
}

pub struct AblationOutcome {
    pub tag: String,
    pub training_records: Vec<TrainingRecord>,
    pub report: RunReport,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config: {message}")]
    Config { message: String },
    #[error("unknown {kind} `{id}`")]
    RegistryMiss { kind: &'static str, id: String },
    #[error("incomplete report: {message}")]
    IncompleteReport { message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(message: &str) -> RunnerError {
    RunnerError::Config { message: message.to_owned() }
}

enum SampleStatus {
    Parsed(crate::parsing::ParsedPrediction),
    Transport(String),
}

struct FewshotCtx<'a> {
    client: &'a EndpointClient,
    index: &'a EmbeddingIndex<f64>,
    k: usize,
}

pub struct Runner {
    bundles: BTreeMap<String, TaskBundle>,
    endpoints: BTreeMap<String, Arc<EndpointClient>>,
    cache: Arc<ResponseCache>,
    index: Option<Arc<EmbeddingIndex<f64>>>,
}

impl Runner {
    pub fn new(cache: Arc<ResponseCache>) -> Self {
        Runner {
            bundles: BTreeMap::new(),
            endpoints: BTreeMap::new(),
            cache,
            index: None,
        }
    }

    /// Registers a task. The guideline must be valid, match the task's label
    /// space, and the evaluation dataset must be non-empty and loaded for
    /// this task.
    pub fn add_task(&mut self, bundle: TaskBundle) -> Result<(), RunnerError> {
        let id = bundle.task.task_id.clone();
        let violations = validate_guideline(&bundle.guideline);
        if !violations.is_empty() {
            return Err(config_err(&format!(
                "guideline `{}` invalid: {violations:?}",
                bundle.guideline.guideline_id
            )));
        }
        if bundle.guideline.label_kind != bundle.task.label_kind {
            return Err(config_err(&format!(
                "guideline `{}` label space does not match task `{id}`",
                bundle.guideline.guideline_id
            )));
        }
        if bundle.dataset.task_id != id {
            return Err(config_err(&format!(
                "dataset belongs to `{}`, not `{id}`",
                bundle.dataset.task_id
            )));
        }
        if bundle.dataset.is_empty() {
            return Err(config_err(&format!("task `{id}` has an empty evaluation set")));
        }
        if self.bundles.insert(id.clone(), bundle).is_some() {
            return Err(config_err(&format!("task `{id}` registered twice")));
        }
        Ok(())
    }

    pub fn add_endpoint(&mut self, client: Arc<EndpointClient>) -> Result<(), RunnerError> {
        let id = client.config().endpoint_id.clone();
        if self.endpoints.insert(id.clone(), client).is_some() {
            return Err(config_err(&format!("endpoint `{id}` registered twice")));
        }
        Ok(())
    }

    /// Few-shot retrieval index. Its recorded embedding endpoint is checked
    /// against the run's embedding endpoint at eval time.
    pub fn set_index(&mut self, index: Arc<EmbeddingIndex<f64>>) {
        self.index = Some(index);
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Registered task ids in sorted order.
    pub fn task_ids(&self) -> Vec<String> {
        self.bundles.keys().cloned().collect()
    }

    pub fn dataset_len(&self, task_id: &str) -> Option<usize> {
        self.bundles.get(task_id).map(|b| b.dataset.len())
    }

    fn bundle(&self, task_id: &str) -> Result<&TaskBundle, RunnerError> {
        self.bundles
            .get(task_id)
            .ok_or_else(|| RunnerError::RegistryMiss { kind: "task", id: task_id.to_owned() })
    }

    fn endpoint(&self, endpoint_id: &str) -> Result<&Arc<EndpointClient>, RunnerError> {
        self.endpoints.get(endpoint_id).ok_or_else(|| RunnerError::RegistryMiss {
            kind: "endpoint",
            id: endpoint_id.to_owned(),
        })
    }

    /// Digest over everything that can change reported numbers: the full run
    /// config (seed and switches included), each task's guideline content,
    /// each endpoint's wire-visible parameters, and the retrieval index
    /// identity in few-shot mode.
    pub fn fingerprint(&self, cfg: &RunConfig) -> Result<String, RunnerError> {
        let mut guidelines = BTreeMap::new();
        for task_id in &cfg.tasks {
            let bundle = self.bundle(task_id)?;
            guidelines.insert(task_id.clone(), bundle.guideline.content_digest());
        }
        let mut endpoints = BTreeMap::new();
        let mut endpoint_ids: Vec<&String> = cfg.endpoints.iter().collect();
        if let Some(e) = &cfg.embedding_endpoint {
            endpoint_ids.push(e);
        }
        for endpoint_id in endpoint_ids {
            let client = self.endpoint(endpoint_id)?;
            let c = client.config();
            endpoints.insert(
                endpoint_id.clone(),
                json!({
                    "kind": c.kind,
                    "model": c.model,
                    "decoding": c.decoding,
                    "prompt_role": c.prompt_role,
                }),
            );
        }
        let index = self.index.as_ref().map(|i| {
            json!({"endpoint_id": i.endpoint_id(), "dim": i.dim(), "count": i.len()})
        });
        let payload = json!({
            "config": cfg,
            "guidelines": guidelines,
            "endpoints": endpoints,
            "index": index,
        });
        let canonical = serde_json::to_string(&payload).expect("fingerprint serializes");
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn run_eval(&self, cfg: &RunConfig) -> Result<RunReport, RunnerError> {
        self.run_tagged(cfg, None)
    }

    fn run_tagged(&self, cfg: &RunConfig, tag: Option<&str>) -> Result<RunReport, RunnerError> {
        cfg.validate()?;
        let mut task_ids = cfg.tasks.clone();
        task_ids.sort_unstable();
        let mut endpoint_ids = cfg.endpoints.clone();
        endpoint_ids.sort_unstable();

        for endpoint_id in &endpoint_ids {
            let client = self.endpoint(endpoint_id)?;
            if client.config().kind != EndpointKind::Chat {
                return Err(config_err(&format!(
                    "endpoint `{endpoint_id}` is not a chat endpoint"
                )));
            }
        }
        let fewshot = match cfg.mode {
            RunMode::ZeroShot => None,
            RunMode::FewShot { k } => {
                let embed_id = cfg.embedding_endpoint.as_deref().expect("validated");
                let client = self.endpoint(embed_id)?;
                if client.config().kind != EndpointKind::Embedding {
                    return Err(config_err(&format!(
                        "endpoint `{embed_id}` is not an embedding endpoint"
                    )));
                }
                let index = self
                    .index
                    .as_ref()
                    .ok_or_else(|| config_err("few-shot mode requires a retrieval index"))?;
                index
                    .ensure_endpoint(&client.config().endpoint_id)
                    .map_err(|e| config_err(&e.to_string()))?;
                Some(FewshotCtx { client, index, k })
            }
        };
        let fingerprint = self.fingerprint(cfg)?;

        let mut cells = Vec::with_capacity(task_ids.len() * endpoint_ids.len());
        for task_id in &task_ids {
            let bundle = self.bundle(task_id)?;
            for endpoint_id in &endpoint_ids {
                let client = self.endpoint(endpoint_id)?;
                cells.push(self.run_cell(bundle, client, cfg, fewshot.as_ref())?);
            }
        }

        let mut averages = BTreeMap::new();
        for endpoint_id in &endpoint_ids {
            let column: Vec<_> = cells
                .iter()
                .filter(|c| &c.endpoint_id == endpoint_id)
                .map(|c| c.metrics.clone())
                .collect();
            averages.insert(endpoint_id.clone(), aggregate(&column)?);
        }

        Ok(RunReport {
            run_id: cfg.run_id.clone(),
            fingerprint,
            mode: cfg.mode,
            seed: cfg.seed,
            ablation_tag: tag.map(str::to_owned),
            task_ids,
            endpoint_ids,
            cells,
            averages,
        })
    }

    /// Evaluates one (task, endpoint) cell. Samples are distributed over at
    /// most `cfg.parallelism` workers and merged back in sample order, so the
    /// outcome list is deterministic regardless of scheduling.
    fn run_cell(
        &self,
        bundle: &TaskBundle,
        client: &EndpointClient,
        cfg: &RunConfig,
        fewshot: Option<&FewshotCtx<'_>>,
    ) -> Result<CellReport, RunnerError> {
        let samples = bundle.dataset.samples();
        let n = samples.len();
        let workers = cfg.parallelism.min(n).max(1);
        let classes = bundle.task.label_kind.class_count();
        let opts = ParserOptions { case_insensitive: cfg.switches.case_insensitive_labels };

        let slots: Vec<Mutex<Option<SampleStatus>>> = (0..n).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for w in 0..workers {
                let slots = &slots;
                scope.spawn(move || {
                    let mut i = w;
                    while i < n {
                        let status = self.process_sample(
                            bundle,
                            client,
                            fewshot,
                            opts,
                            classes,
                            &samples[i].content,
                        );
                        *slots[i].lock().unwrap() = Some(status);
                        i += workers;
                    }
                });
            }
        });

        let mut outcomes = Vec::with_capacity(n);
        let mut transports = 0usize;
        let mut breakdown: BTreeMap<String, usize> = BTreeMap::new();
        for (i, slot) in slots.into_iter().enumerate() {
            let status = slot.into_inner().unwrap().expect("worker fills every slot");
            let gold = samples[i].gold_label;
            match status {
                SampleStatus::Parsed(p) => {
                    if let Outcome::SchemaViolation(reason) = &p.outcome {
                        *breakdown.entry(reason_code(reason)).or_default() += 1;
                    }
                    outcomes.push(EvalOutcome::new(gold, p));
                }
                SampleStatus::Transport(message) => {
                    transports += 1;
                    // Scored like a schema violation (incorrect against every
                    // gold) but accounted separately below.
                    let mut p = parse_label("", classes);
                    p.raw = format!("<transport failure: {message}>");
                    outcomes.push(EvalOutcome::new(gold, p));
                }
            }
        }

        let mut metrics = match bundle.task.label_kind {
            LabelKind::Binary => binary_f1(&outcomes)?,
            LabelKind::MultiClass { classes } => weighted_f1_with(
                &outcomes,
                classes,
                MetricOptions { exclude_class_zero: cfg.switches.exclude_class_zero },
            )?,
        };
        let schema_violations = metrics.parse_failures - transports;
        metrics.parse_failures = schema_violations;

        Ok(CellReport {
            task_id: bundle.task.task_id.clone(),
            endpoint_id: client.config().endpoint_id.clone(),
            n,
            valid: n - schema_violations - transports,
            schema_violations,
            transport_failures: transports,
            violation_breakdown: breakdown,
            metrics,
        })
    }

    fn process_sample(
        &self,
        bundle: &TaskBundle,
        client: &EndpointClient,
        fewshot: Option<&FewshotCtx<'_>>,
        opts: ParserOptions,
        classes: u32,
        content: &str,
    ) -> SampleStatus {
        let prompt = match self.prompt_for(bundle, fewshot, content) {
            Ok(p) => p,
            Err(message) => return SampleStatus::Transport(message),
        };
        let cfg = client.config();
        let key = ResponseCache::key(&cfg.endpoint_id, &cfg.decoding, &prompt.text);
        match self.cache.get_or_insert_with(&key, || client.complete(&prompt)) {
            Ok((resp, _hit)) => {
                SampleStatus::Parsed(parse_label_with(&resp.raw_text, classes, opts))
            }
            Err(e) => SampleStatus::Transport(e.to_string()),
        }
    }

    fn prompt_for(
        &self,
        bundle: &TaskBundle,
        fewshot: Option<&FewshotCtx<'_>>,
        content: &str,
    ) -> Result<PromptInstance, String> {
        match fewshot {
            None => compile_prompt(&bundle.guideline, content).map_err(|e| e.to_string()),
            Some(ctx) => {
                let queries = ctx
                    .client
                    .embed(std::slice::from_ref(&content.to_owned()))
                    .map_err(|e| e.to_string())?;
                let selection =
                    ctx.index.select_topk(&queries[0], ctx.k).map_err(|e| e.to_string())?;
                let resolved = ctx.index.resolve(&selection).map_err(|e| e.to_string())?;
                assemble_fewshot_prompt(&bundle.guideline, &selection, &resolved, content)
                    .map_err(|e| e.to_string())
            }
        }
    }

    /// Runs one exclusion experiment per entry: exports the training corpus
    /// without the excluded tasks, then evaluates the base config and tags
    /// the report. Evaluation data is never excluded; only training export
    /// changes between variants.
    pub fn run_ablation(
        &self,
        base: &RunConfig,
        specs: &[AblationSpec],
    ) -> Result<Vec<AblationOutcome>, RunnerError> {
        let mut outcomes = Vec::with_capacity(specs.len());
        for spec in specs {
            for excluded in &spec.exclude {
                if !self.bundles.contains_key(excluded) {
                    return Err(config_err(&format!(
                        "ablation `{}` excludes unknown task `{excluded}`",
                        spec.tag
                    )));
                }
            }
            let mut training_records = Vec::new();
            for (task_id, bundle) in &self.bundles {
                if spec.exclude.contains(task_id) {
                    continue;
                }
                if let Some(train) = &bundle.train {
                    training_records.extend(export_training_records(train, &bundle.guideline)?);
                }
            }
            let report = self.run_tagged(base, Some(&spec.tag))?;
            outcomes.push(AblationOutcome {
                tag: spec.tag.clone(),
                training_records,
                report,
            });
        }
        Ok(outcomes)
    }
}

fn reason_code(reason: &ViolationReason) -> String {
    serde_json::to_value(reason)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .expect("reason serializes to a string code")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabeledDataset, Sample, Split};
    use crate::fewshot::EmbeddingRecord;
    use crate::guideline::CategoryDefinition;
    use crate::modelclient::script::{ScriptedTransport, Step};
    use crate::modelclient::{
        EndpointConfig, HttpRequest, HttpResponse, Transport, TransportError, VirtualClock,
    };
    use crate::taxonomy::{Distribution, Subcategory};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn task(task_id: &str) -> TaskSpec {
        TaskSpec {
            task_id: task_id.to_owned(),
            dataset_id: "d".to_owned(),
            label_kind: LabelKind::Binary,
            subcategory_marks: [Subcategory::ToxicLanguageHateSpeech].into(),
            distribution: Distribution::OutOfDistribution,
            language_tag: "en".to_owned(),
        }
    }

    fn guideline(id: &str) -> Guideline {
        Guideline::binary(
            id,
            "Toxicity Guidelines",
            CategoryDefinition::new(0, "Safe", "No policy concern."),
            CategoryDefinition::new(1, "Toxic", "Attacks or demeans a person or group."),
        )
    }

    fn dataset(task_id: &str, golds: &[u32]) -> LabeledDataset {
        let samples = golds
            .iter()
            .enumerate()
            .map(|(i, &g)| Sample::new(&format!("s{i}"), &format!("sample text {i}"), g))
            .collect();
        LabeledDataset::new(task_id, Split::Test, LabelKind::Binary, samples).unwrap()
    }

    fn bundle(task_id: &str, golds: &[u32]) -> TaskBundle {
        TaskBundle {
            task: task(task_id),
            guideline: guideline(&format!("g-{task_id}")),
            dataset: dataset(task_id, golds),
            train: None,
        }
    }

    fn chat_client(id: &str, transport: Arc<ScriptedTransport>) -> Arc<EndpointClient> {
        let mut cfg = EndpointConfig::chat(id, "https://mock.test", "mock-model");
        cfg.retry.jitter = false;
        Arc::new(EndpointClient::with_parts(cfg, transport, Arc::new(VirtualClock::new())))
    }

    fn runner_with(
        bundles: Vec<TaskBundle>,
        clients: Vec<Arc<EndpointClient>>,
    ) -> Runner {
        let mut runner = Runner::new(Arc::new(ResponseCache::in_memory()));
        for b in bundles {
            runner.add_task(b).unwrap();
        }
        for c in clients {
            runner.add_endpoint(c).unwrap();
        }
        runner
    }

    #[test]
    fn always_positive_mock_hand_metrics() {
        let transport = Arc::new(ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())));
        let runner = runner_with(
            vec![bundle("t/h", &[1, 1, 0, 0])],
            vec![chat_client("ep", transport)],
        );
        let report = runner.run_eval(&RunConfig::new("r", &["t/h"], &["ep"])).unwrap();
        let cell = report.cell("t/h", "ep").unwrap();
        assert_eq!(cell.metrics.precision, 0.5);
        assert_eq!(cell.metrics.recall, 1.0);
        assert!((cell.metrics.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((cell.n, cell.valid), (4, 4));
        assert_eq!(report.averages["ep"], cell.metrics.f1);
    }

    #[test]
    fn all_harmful_set_scores_perfect_with_agreeing_mock() {
        let transport = Arc::new(ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())));
        let runner = runner_with(
            vec![bundle("t/h", &[1, 1, 1, 1, 1])],
            vec![chat_client("ep", transport)],
        );
        let report = runner.run_eval(&RunConfig::new("r", &["t/h"], &["ep"])).unwrap();
        assert_eq!(report.cell("t/h", "ep").unwrap().metrics.f1, 1.0);
    }

    #[test]
    fn warm_cache_rerun_is_free_and_identical() {
        let transport = Arc::new(ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())));
        let runner = runner_with(
            vec![bundle("t/h", &[1, 0, 1, 0])],
            vec![chat_client("ep", transport.clone())],
        );
        let cfg = RunConfig::new("r", &["t/h"], &["ep"]);
        let first = runner.run_eval(&cfg).unwrap();
        assert_eq!(transport.calls(), 4);
        let second = runner.run_eval(&cfg).unwrap();
        assert_eq!(transport.calls(), 4, "warm cache issues no endpoint calls");
        assert_eq!(
            emit_report(&first, ReportFormat::MachineRecord).unwrap(),
            emit_report(&second, ReportFormat::MachineRecord).unwrap()
        );
        assert_eq!(runner.cache().hits(), 4);
    }

    #[test]
    fn accounting_identity_with_mixed_failures() {
        let transport = Arc::new(ScriptedTransport::new(vec![
            Step::ChatOk("Label: 1".into()),
            Step::ChatOk("no verdict given".into()),
            Step::Status(500, "down".into()),
            Step::ChatOk("Label: 0".into()),
        ]));
        let mut cfg_ep = EndpointConfig::chat("ep", "https://mock.test", "m");
        cfg_ep.retry.max_attempts = 1;
        let client = Arc::new(EndpointClient::with_parts(
            cfg_ep,
            transport,
            Arc::new(VirtualClock::new()),
        ));
        let runner = runner_with(vec![bundle("t/h", &[1, 0, 1, 0])], vec![client]);
        let report = runner.run_eval(&RunConfig::new("r", &["t/h"], &["ep"])).unwrap();
        let cell = report.cell("t/h", "ep").unwrap();
        assert_eq!(cell.n, 4);
        assert_eq!(cell.valid, 2);
        assert_eq!(cell.schema_violations, 1);
        assert_eq!(cell.transport_failures, 1);
        assert_eq!(cell.n, cell.valid + cell.schema_violations + cell.transport_failures);
        assert_eq!(cell.metrics.parse_failures, 1, "schema violations only");
        assert_eq!(cell.violation_breakdown["NoLabelToken"], 1);
        assert_eq!(cell.violation_breakdown.len(), 1);
        // tp=1 (s0), fn=1 (s2 transport on gold 1), fp=0.
        assert_eq!(cell.metrics.precision, 1.0);
        assert_eq!(cell.metrics.recall, 0.5);
        assert!(report.is_partial());
        assert!(!report.is_total_failure());
    }

    #[test]
    fn fingerprint_reacts_to_every_knob() {
        let transport = Arc::new(ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())));
        let runner = runner_with(
            vec![bundle("t/h", &[1, 0])],
            vec![chat_client("ep", transport.clone())],
        );
        let base_cfg = RunConfig::new("r", &["t/h"], &["ep"]);
        let base = runner.fingerprint(&base_cfg).unwrap();
        assert_eq!(base, runner.fingerprint(&base_cfg).unwrap(), "stable for equal config");

        let mut prints = vec![base.clone()];
        let mut with = |mutate: &dyn Fn(&mut RunConfig)| {
            let mut cfg = base_cfg.clone();
            mutate(&mut cfg);
            prints.push(runner.fingerprint(&cfg).unwrap());
        };
        with(&|c| c.switches.case_insensitive_labels = true);
        with(&|c| c.switches.exclude_class_zero = true);
        with(&|c| c.switches.threshold = 0.6);
        with(&|c| c.switches.threshold_boundary = ThresholdBoundary::Exclusive);
        with(&|c| c.seed = 99);
        with(&|c| c.parallelism = 4);

        // Changed guideline text changes the fingerprint through its digest.
        let mut altered = guideline("g-t/h");
        altered.definitions[1].definition_text = "Entirely new wording.".to_owned();
        let mut other = Runner::new(Arc::new(ResponseCache::in_memory()));
        other
            .add_task(TaskBundle {
                task: task("t/h"),
                guideline: altered,
                dataset: dataset("t/h", &[1, 0]),
                train: None,
            })
            .unwrap();
        other.add_endpoint(chat_client("ep", transport.clone())).unwrap();
        prints.push(other.fingerprint(&base_cfg).unwrap());

        // Changed decoding parameters likewise.
        let mut warm = Runner::new(Arc::new(ResponseCache::in_memory()));
        warm.add_task(bundle("t/h", &[1, 0])).unwrap();
        let mut cfg_ep = EndpointConfig::chat("ep", "https://mock.test", "mock-model");
        cfg_ep.decoding.temperature = 0.8;
        warm.add_endpoint(Arc::new(EndpointClient::with_parts(
            cfg_ep,
            transport,
            Arc::new(VirtualClock::new()),
        )))
        .unwrap();
        prints.push(warm.fingerprint(&base_cfg).unwrap());

        let distinct: BTreeSet<&String> = prints.iter().collect();
        assert_eq!(distinct.len(), prints.len(), "every knob changes the fingerprint");
    }

    #[test]
    fn validation_and_registry_errors() {
        let transport = Arc::new(ScriptedTransport::repeating(Step::ChatOk("x".into())));
        let runner = runner_with(vec![bundle("t/h", &[1])], vec![chat_client("ep", transport)]);

        assert!(matches!(
            runner.run_eval(&RunConfig::new("r", &["ghost"], &["ep"])),
            Err(RunnerError::RegistryMiss { kind: "task", .. })
        ));
        assert!(matches!(
            runner.run_eval(&RunConfig::new("r", &["t/h"], &["ghost"])),
            Err(RunnerError::RegistryMiss { kind: "endpoint", .. })
        ));
        let mut dup = RunConfig::new("r", &["t/h", "t/h"], &["ep"]);
        assert!(matches!(runner.run_eval(&dup), Err(RunnerError::Config { .. })));
        dup = RunConfig::new("r", &["t/h"], &["ep"]);
        dup.parallelism = 0;
        assert!(matches!(runner.run_eval(&dup), Err(RunnerError::Config { .. })));
        dup.parallelism = MAX_PARALLELISM + 1;
        assert!(matches!(runner.run_eval(&dup), Err(RunnerError::Config { .. })));
        let mut fs = RunConfig::new("r", &["t/h"], &["ep"]);
        fs.mode = RunMode::FewShot { k: 5 };
        assert!(matches!(runner.run_eval(&fs), Err(RunnerError::Config { .. })));
    }

    #[test]
    fn add_task_rejects_bad_bundles() {
        let mut runner = Runner::new(Arc::new(ResponseCache::in_memory()));
        // Empty dataset.
        let empty = LabeledDataset::new("t/h", Split::Test, LabelKind::Binary, vec![]).unwrap();
        assert!(matches!(
            runner.add_task(TaskBundle {
                task: task("t/h"),
                guideline: guideline("g"),
                dataset: empty,
                train: None,
            }),
            Err(RunnerError::Config { .. })
        ));
        // Dataset loaded for a different task.
        assert!(matches!(
            runner.add_task(TaskBundle {
                task: task("t/h"),
                guideline: guideline("g"),
                dataset: dataset("other", &[1]),
                train: None,
            }),
            Err(RunnerError::Config { .. })
        ));
        // Label-space mismatch between guideline and task.
        let mut multi = task("t/h");
        multi.label_kind = LabelKind::MultiClass { classes: 3 };
        assert!(matches!(
            runner.add_task(TaskBundle {
                task: multi,
                guideline: guideline("g"),
                dataset: dataset("t/h", &[1]),
                train: None,
            }),
            Err(RunnerError::Config { .. })
        ));
    }

    fn train_split(task_id: &str, golds: &[u32]) -> LabeledDataset {
        let samples = golds
            .iter()
            .enumerate()
            .map(|(i, &g)| Sample::new(&format!("tr{i}"), &format!("train {i}"), g))
            .collect();
        LabeledDataset::new(task_id, Split::Train, LabelKind::Binary, samples).unwrap()
    }

    #[test]
    fn ablation_excludes_training_data_only() {
        let transport = Arc::new(ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())));
        let mut a = bundle("a/h", &[1, 0]);
        a.train = Some(train_split("a/h", &[1, 1, 0]));
        let mut b = bundle("b/h", &[1, 1]);
        b.train = Some(train_split("b/h", &[0, 1]));
        let runner = runner_with(vec![a, b], vec![chat_client("ep", transport)]);
        let cfg = RunConfig::new("r", &["a/h", "b/h"], &["ep"]);

        let baseline = runner.run_eval(&cfg).unwrap();
        let outcomes = runner
            .run_ablation(
                &cfg,
                &[
                    AblationSpec { tag: "full".to_owned(), exclude: BTreeSet::new() },
                    AblationSpec {
                        tag: "w/o a".to_owned(),
                        exclude: ["a/h".to_owned()].into(),
                    },
                ],
            )
            .unwrap();
        assert_eq!(outcomes.len(), 2);

        let full = &outcomes[0];
        assert_eq!(full.tag, "full");
        assert_eq!(full.training_records.len(), 5);
        assert_eq!(full.report.cells, baseline.cells, "empty exclusion reproduces run_eval");
        assert_eq!(full.report.averages, baseline.averages);
        assert_eq!(full.report.ablation_tag.as_deref(), Some("full"));

        let without_a = &outcomes[1];
        assert_eq!(without_a.training_records.len(), 2);
        assert!(without_a.training_records.iter().all(|r| r.task_id == "b/h"));
        assert!(without_a
            .training_records
            .iter()
            .all(|r| r.target_text == "Label: 0" || r.target_text == "Label: 1"));

        assert!(matches!(
            runner.run_ablation(
                &cfg,
                &[AblationSpec { tag: "x".to_owned(), exclude: ["ghost".to_owned()].into() }]
            ),
            Err(RunnerError::Config { .. })
        ));
    }

    #[test]
    fn fewshot_mode_injects_examples() {
        let chat = Arc::new(ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())));
        let embed = Arc::new(ScriptedTransport::repeating(Step::Json(serde_json::json!({
            "data": [{"embedding": [1.0, 0.0]}]
        }))));
        let mut embed_cfg = EndpointConfig::chat("emb", "https://mock.test", "embedder");
        embed_cfg.kind = EndpointKind::Embedding;
        let embed_client = Arc::new(EndpointClient::with_parts(
            embed_cfg,
            embed,
            Arc::new(VirtualClock::new()),
        ));

        let mut runner = runner_with(
            vec![bundle("t/h", &[1, 0])],
            vec![chat_client("ep", chat.clone())],
        );
        runner.add_endpoint(embed_client).unwrap();
        let index = EmbeddingIndex::build(
            "emb",
            vec![
                EmbeddingRecord {
                    sample_id: "tr0".to_owned(),
                    vector: vec![1.0, 0.0],
                    gold_label: 1,
                    content: "shot one".to_owned(),
                },
                EmbeddingRecord {
                    sample_id: "tr1".to_owned(),
                    vector: vec![0.9, 0.1],
                    gold_label: 0,
                    content: "shot two".to_owned(),
                },
                EmbeddingRecord {
                    sample_id: "tr2".to_owned(),
                    vector: vec![0.0, 1.0],
                    gold_label: 1,
                    content: "shot three".to_owned(),
                },
            ],
        )
        .unwrap();
        runner.set_index(Arc::new(index));

        let mut cfg = RunConfig::new("r", &["t/h"], &["ep"]);
        cfg.mode = RunMode::FewShot { k: 2 };
        cfg.embedding_endpoint = Some("emb".to_owned());
        let report = runner.run_eval(&cfg).unwrap();
        assert_eq!(report.mode, RunMode::FewShot { k: 2 });
        assert_eq!(report.cell("t/h", "ep").unwrap().valid, 2);

        let sent = chat.requests();
        let prompt = sent[0].body["messages"][0]["content"].as_str().unwrap();
        assert!(prompt.contains("Examples\n"));
        assert!(prompt.contains("shot one\nLabel: 1\n"));
        assert!(prompt.contains("shot two\nLabel: 0\n"));
        assert!(!prompt.contains("shot three"), "k=2 keeps only the nearest shots");

        // Index endpoint must match the run's embedding endpoint.
        let mut wrong = cfg.clone();
        wrong.embedding_endpoint = Some("ep".to_owned());
        assert!(matches!(runner.run_eval(&wrong), Err(RunnerError::Config { .. })));
    }

    struct Gauge {
        inner: ScriptedTransport,
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Transport for Gauge {
        fn execute(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            let out = self.inner.execute(req);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            out
        }
    }

    #[test]
    fn parallelism_bounds_in_flight_requests() {
        let gauge = Arc::new(Gauge {
            inner: ScriptedTransport::repeating(Step::ChatOk("Label: 1".into())),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let mut cfg_ep = EndpointConfig::chat("ep", "https://mock.test", "m");
        cfg_ep.retry.jitter = false;
        let client = Arc::new(EndpointClient::with_parts(
            cfg_ep,
            gauge.clone(),
            Arc::new(VirtualClock::new()),
        ));
        let golds: Vec<u32> = (0..12).map(|i| i % 2).collect();
        let runner = runner_with(vec![bundle("t/h", &golds)], vec![client]);
        let mut cfg = RunConfig::new("r", &["t/h"], &["ep"]);
        cfg.parallelism = 3;
        runner.run_eval(&cfg).unwrap();
        assert!(gauge.peak.load(Ordering::SeqCst) <= 3);
        assert_eq!(gauge.inner.calls(), 12);
    }
}
