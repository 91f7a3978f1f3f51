//! Command-line front end: loads the project config, builds the runner, and
//! dispatches subcommands. Exit codes: 0 success, 2 config error, 3 partial
//! run (some samples failed on transport), 4 total failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use guardbench::corpus::{
    check_split_disjoint, emit_training_config, sample_fixed, strategic_sample,
    write_training_jsonl, LabeledDataset, Split,
};
use guardbench::fewshot::{EmbeddingIndex, DEFAULT_SHOT_COUNT};
use guardbench::guideline::{compile_prompt, dump_prompt};
use guardbench::modelclient::{EndpointClient, EndpointKind, ThresholdBoundary};
use guardbench::runner::config::{
    load_binding, load_endpoints, load_guideline, load_manifest, load_project, load_tasks,
    DatasetBinding, ProjectConfig,
};
use guardbench::runner::{
    emit_report, gain_table, AblationSpec, ReportFormat, ResponseCache, RunConfig, RunMode,
    RunReport, Runner, TaskBundle,
};
use guardbench::taxonomy::{similarity_matrix, TaskRegistry};

#[derive(Parser)]
#[command(name = "guardbench", version, about = "Cross-task content moderation evaluation harness")]
struct Cli {
    /// Project config (TOML) declaring the task, guideline, endpoint, and
    /// dataset registries by path.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all deterministic sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker pool size per (task, endpoint) cell.
    #[arg(long, global = true, default_value_t = 1)]
    parallelism: usize,
    /// On-disk response cache directory; overrides the config's cache_dir.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Plan the run and print its fingerprint without issuing endpoint calls.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load every dataset binding and write the canonical sample store.
    Ingest {
        /// Output directory for canonical JSONL, one file per (task, split).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a guideline against one content string and print the prompt.
    CompilePrompt {
        /// Guideline id resolved under the config's guidelines_dir.
        #[arg(long)]
        guideline: String,
        #[arg(long, conflicts_with = "content_file")]
        content: Option<String>,
        #[arg(long)]
        content_file: Option<PathBuf>,
        /// Also dump the prompt to a content-addressed file in this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Draw a deterministic sample from the configured datasets.
    Sample {
        /// Total budget split strategically across all bound tasks.
        #[arg(long, conflicts_with_all = ["task", "take"])]
        budget: Option<usize>,
        /// Single task to sample from (with --take).
        #[arg(long, requires = "take")]
        task: Option<String>,
        /// Fixed sample size for --task.
        #[arg(long, requires = "task")]
        take: Option<usize>,
    },
    /// Export training records and the tuning configuration.
    ExportTrain {
        /// Output directory; receives train.jsonl and training.toml.
        #[arg(long)]
        out: PathBuf,
        /// Task ids whose training data is withheld.
        #[arg(long = "exclude")]
        exclude: Vec<String>,
    },
    /// Evaluate configured tasks against endpoints.
    Eval(EvalArgs),
    /// Evaluate under training-exclusion variants read from an ablation file.
    Ablate {
        #[command(flatten)]
        eval: EvalArgs,
        /// TOML file with [[ablations]] entries (tag, exclude).
        #[arg(long)]
        spec: PathBuf,
        /// Directory receiving per-variant training exports and reports.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Export the task similarity matrix, optionally joined with F1 gains.
    Similarity {
        /// Matrix CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stored machine record to join gains from.
        #[arg(long, requires_all = ["baseline", "tuned"])]
        report: Option<PathBuf>,
        /// Baseline endpoint id in the report.
        #[arg(long)]
        baseline: Option<String>,
        /// Tuned endpoint id in the report.
        #[arg(long)]
        tuned: Option<String>,
        /// Gain CSV path; stdout when omitted.
        #[arg(long)]
        gain_out: Option<PathBuf>,
    },
    /// Re-render a stored machine record.
    Report {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Plain)]
        format: FormatArg,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "run")]
    run_id: String,
    /// Tasks to evaluate; defaults to every bound task.
    #[arg(long = "task")]
    tasks: Vec<String>,
    /// Endpoints to evaluate; defaults to every configured chat endpoint.
    #[arg(long = "endpoint")]
    endpoints: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::ZeroShot)]
    mode: ModeArg,
    /// Shots per prompt in few-shot mode.
    #[arg(long, default_value_t = DEFAULT_SHOT_COUNT)]
    shots: usize,
    /// Embedding endpoint id, required in few-shot mode.
    #[arg(long)]
    embedding_endpoint: Option<String>,
    /// Retrieval index file, required in few-shot mode.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Accept `label:`/`LABEL:` in addition to `Label:`.
    #[arg(long)]
    case_insensitive_labels: bool,
    /// Drop class 0 from support weighting in multi-class F1.
    #[arg(long)]
    exclude_class_zero: bool,
    /// Moderation-score binarization threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Map a score equal to the threshold to 0 instead of 1.
    #[arg(long)]
    exclusive_threshold: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Plain)]
    format: FormatArg,
    /// Report file path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    ZeroShot,
    FewShot,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Plain,
    Machine,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Plain => ReportFormat::PlainTable,
            FormatArg::Machine => ReportFormat::MachineRecord,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Ingest { out } => cmd_ingest(&cli, out),
        Command::CompilePrompt { guideline, content, content_file, out_dir } => {
            cmd_compile_prompt(&cli, guideline, content.as_deref(), content_file.as_deref(), out_dir.as_deref())
        }
        Command::Sample { budget, task, take } => cmd_sample(&cli, *budget, task.as_deref(), *take),
        Command::ExportTrain { out, exclude } => cmd_export_train(&cli, out, exclude),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Ablate { eval, spec, out_dir } => cmd_ablate(&cli, eval, spec, out_dir.as_deref()),
        Command::Similarity { out, report, baseline, tuned, gain_out } => cmd_similarity(
            &cli,
            out.as_deref(),
            report.as_deref(),
            baseline.as_deref(),
            tuned.as_deref(),
            gain_out.as_deref(),
        ),
        Command::Report { path, format } => cmd_report(path, *format),
    }
}

/// Everything declared by the project config, loaded and path-resolved.
struct Project {
    cfg: ProjectConfig,
    registry: TaskRegistry,
    bindings: Vec<DatasetBinding>,
    endpoints: Vec<guardbench::modelclient::EndpointConfig>,
}

fn load(cli: &Cli) -> Result<Project> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow!("--config is required for this command"))?;
    let cfg = load_project(path)?;
    let registry = load_tasks(&cfg)?;
    let bindings = load_manifest(&cfg.datasets)?.datasets;
    let endpoints = load_endpoints(&cfg.endpoints)?;
    Ok(Project { cfg, registry, bindings, endpoints })
}

/// One task's loaded splits, grouped from its manifest bindings.
struct LoadedTask {
    guideline_id: String,
    test: Option<LabeledDataset>,
    train: Option<LabeledDataset>,
}

fn load_datasets(project: &Project, seed: u64) -> Result<BTreeMap<String, LoadedTask>> {
    let base = project.cfg.datasets.parent().unwrap_or_else(|| Path::new("."));
    let mut by_task: BTreeMap<String, LoadedTask> = BTreeMap::new();
    for binding in &project.bindings {
        let task = project
            .registry
            .get(&binding.task_id)
            .ok_or_else(|| anyhow!("dataset bound to unknown task `{}`", binding.task_id))?;
        let dataset = load_binding(binding, base, task, seed)
            .with_context(|| format!("loading dataset for `{}`", binding.task_id))?;
        let entry = by_task.entry(binding.task_id.clone()).or_insert_with(|| LoadedTask {
            guideline_id: binding.guideline_id.clone(),
            test: None,
            train: None,
        });
        if entry.guideline_id != binding.guideline_id {
            bail!(
                "task `{}` bound to two guidelines (`{}`, `{}`)",
                binding.task_id,
                entry.guideline_id,
                binding.guideline_id
            );
        }
        let slot = match binding.split {
            Split::Test => &mut entry.test,
            Split::Train => &mut entry.train,
        };
        if slot.is_some() {
            bail!("task `{}` has two {} bindings", binding.task_id, binding.split.as_str());
        }
        *slot = Some(dataset);
    }
    for (task_id, loaded) in &by_task {
        if let (Some(train), Some(test)) = (&loaded.train, &loaded.test) {
            check_split_disjoint(train, test)
                .with_context(|| format!("task `{task_id}` splits overlap"))?;
        }
    }
    Ok(by_task)
}

fn build_cache(cli: &Cli, cfg: &ProjectConfig) -> Result<Arc<ResponseCache>> {
    let dir = cli.cache_dir.as_deref().or(cfg.cache_dir.as_deref());
    Ok(Arc::new(match dir {
        Some(d) => ResponseCache::at_dir(d)?,
        None => ResponseCache::in_memory(),
    }))
}

fn build_runner(cli: &Cli, project: &Project, index: Option<PathBuf>) -> Result<Runner> {
    let mut runner = Runner::new(build_cache(cli, &project.cfg)?);
    let datasets = load_datasets(project, cli.seed)?;
    for (task_id, loaded) in datasets {
        let Some(dataset) = loaded.test else {
            // Train-only bindings feed export-train; they are not evaluable.
            continue;
        };
        let task = project.registry.get(&task_id).expect("checked during load").clone();
        let guideline = load_guideline(&project.cfg, &loaded.guideline_id)?;
        runner.add_task(TaskBundle { task, guideline, dataset, train: loaded.train })?;
    }
    for cfg in &project.endpoints {
        runner.add_endpoint(Arc::new(EndpointClient::new(cfg.clone())))?;
    }
    if let Some(path) = index {
        runner.set_index(Arc::new(EmbeddingIndex::<f64>::load(&path)?));
    }
    Ok(runner)
}

fn cmd_ingest(cli: &Cli, out: &Path) -> Result<i32> {
    let project = load(cli)?;
    let datasets = load_datasets(&project, cli.seed)?;
    fs::create_dir_all(out)?;
    let mut files = 0usize;
    for (task_id, loaded) in datasets {
        for dataset in [loaded.test, loaded.train].into_iter().flatten() {
            let name = format!("{}.{}.jsonl", task_id.replace('/', "__"), dataset.split.as_str());
            let path = out.join(&name);
            let mut body = String::new();
            for sample in dataset.samples() {
                body.push_str(&serde_json::to_string(sample)?);
                body.push('\n');
            }
            fs::write(&path, body)?;
            println!("{name}: {} samples, harmful_ratio {:.3}", dataset.len(), dataset.harmful_ratio());
            files += 1;
        }
    }
    if files == 0 {
        bail!("no datasets bound in {}", project.cfg.datasets.display());
    }
    Ok(0)
}

fn cmd_compile_prompt(
    cli: &Cli,
    guideline_id: &str,
    content: Option<&str>,
    content_file: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<i32> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow!("--config is required for this command"))?;
    let cfg = load_project(path)?;
    let g = load_guideline(&cfg, guideline_id)?;
    let owned;
    let content = match (content, content_file) {
        (Some(c), _) => c,
        (None, Some(f)) => {
            owned = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            &owned
        }
        (None, None) => bail!("provide --content or --content-file"),
    };
    let prompt = compile_prompt(&g, content)?;
    if let Some(dir) = out_dir {
        let written = dump_prompt(dir, &prompt)?;
        eprintln!("wrote {}", written.display());
    }
    print!("{}", prompt.text);
    Ok(0)
}

fn cmd_sample(cli: &Cli, budget: Option<usize>, task: Option<&str>, take: Option<usize>) -> Result<i32> {
    let project = load(cli)?;
    let datasets = load_datasets(&project, cli.seed)?;
    let evals: Vec<&LabeledDataset> =
        datasets.values().filter_map(|l| l.test.as_ref()).collect();
    let print_selection = |d: &LabeledDataset| {
        for sample in d.samples() {
            println!("{}\t{}", d.task_id, sample.sample_id);
        }
    };
    match (budget, task) {
        (Some(budget), None) => {
            let refs: Vec<LabeledDataset> = evals.into_iter().cloned().collect();
            let selected = strategic_sample(&refs, budget, cli.seed)?;
            for d in &selected {
                eprintln!("{}: {} selected", d.task_id, d.len());
                print_selection(d);
            }
        }
        (None, Some(task_id)) => {
            let n = take.expect("clap enforces --take with --task");
            let loaded = datasets
                .get(task_id)
                .and_then(|l| l.test.as_ref())
                .ok_or_else(|| anyhow!("no evaluation split bound for `{task_id}`"))?;
            print_selection(&sample_fixed(loaded, n, cli.seed));
        }
        _ => bail!("provide either --budget or --task with --take"),
    }
    Ok(0)
}

fn cmd_export_train(cli: &Cli, out: &Path, exclude: &[String]) -> Result<i32> {
    let project = load(cli)?;
    // Collect records straight from the loaded splits: train-only tasks are
    // exportable even though they are not evaluable.
    let datasets = load_datasets(&project, cli.seed)?;
    let known: BTreeSet<&String> = datasets.keys().collect();
    for task_id in exclude {
        if !known.contains(task_id) {
            bail!("--exclude references unknown task `{task_id}`");
        }
    }
    let mut records = Vec::new();
    for (task_id, loaded) in &datasets {
        if exclude.contains(task_id) {
            continue;
        }
        if let Some(train) = &loaded.train {
            let g = load_guideline(&project.cfg, &loaded.guideline_id)?;
            records.extend(guardbench::corpus::export_training_records(train, &g)?);
        }
    }
    if records.is_empty() {
        bail!("no training splits bound; nothing to export");
    }
    fs::create_dir_all(out)?;
    write_training_jsonl(&records, &out.join("train.jsonl"))?;
    fs::write(out.join("training.toml"), emit_training_config())?;
    println!("{} training records -> {}", records.len(), out.display());
    Ok(0)
}

fn run_config_from(cli: &Cli, args: &EvalArgs, runner: &Runner, project: &Project) -> Result<RunConfig> {
    let tasks = if args.tasks.is_empty() {
        runner.task_ids()
    } else {
        args.tasks.clone()
    };
    let endpoints = if args.endpoints.is_empty() {
        project
            .endpoints
            .iter()
            .filter(|e| e.kind == EndpointKind::Chat)
            .map(|e| e.endpoint_id.clone())
            .collect()
    } else {
        args.endpoints.clone()
    };
    let mut cfg = RunConfig {
        run_id: args.run_id.clone(),
        tasks,
        endpoints,
        mode: match args.mode {
            ModeArg::ZeroShot => RunMode::ZeroShot,
            ModeArg::FewShot => RunMode::FewShot { k: args.shots },
        },
        embedding_endpoint: args.embedding_endpoint.clone(),
        parallelism: cli.parallelism,
        seed: cli.seed,
        switches: Default::default(),
    };
    cfg.switches.case_insensitive_labels = args.case_insensitive_labels;
    cfg.switches.exclude_class_zero = args.exclude_class_zero;
    cfg.switches.threshold = args.threshold;
    if args.exclusive_threshold {
        cfg.switches.threshold_boundary = ThresholdBoundary::Exclusive;
    }
    Ok(cfg)
}

fn exit_code(report: &RunReport) -> i32 {
    if report.is_total_failure() {
        4
    } else if report.is_partial() {
        3
    } else {
        0
    }
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<i32> {
    let project = load(cli)?;
    if args.mode == ModeArg::FewShot && args.index.is_none() {
        bail!("few-shot mode requires --index");
    }
    let runner = build_runner(cli, &project, args.index.clone())?;
    let cfg = run_config_from(cli, args, &runner, &project)?;
    if cli.dry_run {
        let fingerprint = runner.fingerprint(&cfg)?;
        let samples: usize = cfg
            .tasks
            .iter()
            .map(|t| runner.dataset_len(t).unwrap_or(0))
            .sum();
        println!(
            "dry run: {} tasks x {} endpoints, {} samples per endpoint",
            cfg.tasks.len(),
            cfg.endpoints.len(),
            samples
        );
        println!("fingerprint {fingerprint}");
        return Ok(0);
    }
    let report = runner.run_eval(&cfg)?;
    write_or_print(&emit_report(&report, args.format.into())?, args.out.as_deref())?;
    Ok(exit_code(&report))
}

#[derive(serde::Deserialize)]
struct AblationFile {
    ablations: Vec<AblationSpec>,
}

fn cmd_ablate(cli: &Cli, args: &EvalArgs, spec: &Path, out_dir: Option<&Path>) -> Result<i32> {
    let project = load(cli)?;
    let runner = build_runner(cli, &project, args.index.clone())?;
    let cfg = run_config_from(cli, args, &runner, &project)?;
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let file: AblationFile = toml::from_str(&text).with_context(|| spec.display().to_string())?;
    if file.ablations.is_empty() {
        bail!("{} declares no ablations", spec.display());
    }
    if cli.dry_run {
        println!(
            "dry run: {} ablation variants over {} tasks x {} endpoints",
            file.ablations.len(),
            cfg.tasks.len(),
            cfg.endpoints.len()
        );
        println!("fingerprint {}", runner.fingerprint(&cfg)?);
        return Ok(0);
    }
    let outcomes = runner.run_ablation(&cfg, &file.ablations)?;
    let mut worst = 0i32;
    for outcome in &outcomes {
        let tag = outcome.tag.replace(['/', ' '], "_");
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            write_training_jsonl(&outcome.training_records, &dir.join(format!("{tag}.train.jsonl")))?;
            fs::write(
                dir.join(format!("{tag}.report.json")),
                emit_report(&outcome.report, ReportFormat::MachineRecord)?,
            )?;
        }
        println!("== {} ({} training records)", outcome.tag, outcome.training_records.len());
        print!("{}", emit_report(&outcome.report, args.format.into())?);
        worst = worst.max(exit_code(&outcome.report));
    }
    Ok(worst)
}

fn cmd_similarity(
    cli: &Cli,
    out: Option<&Path>,
    report: Option<&Path>,
    baseline: Option<&str>,
    tuned: Option<&str>,
    gain_out: Option<&Path>,
) -> Result<i32> {
    // Works without a full project: the built-in registry is the default.
    let registry = match cli.config.as_deref() {
        Some(path) => load_tasks(&load_project(path)?)?,
        None => TaskRegistry::builtin(),
    };
    let matrix = similarity_matrix(registry.tasks())?;
    write_or_print(&matrix.to_csv_string(), out)?;
    if let Some(report_path) = report {
        let text = fs::read_to_string(report_path)
            .with_context(|| format!("reading {}", report_path.display()))?;
        let report: RunReport = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a machine record", report_path.display()))?;
        let baseline = baseline.expect("clap enforces --baseline with --report");
        let tuned = tuned.expect("clap enforces --tuned with --report");
        let gains = gain_table(&report, baseline, tuned, &registry)?;
        write_or_print(&gains, gain_out)?;
    }
    Ok(0)
}

fn cmd_report(path: &Path, format: FormatArg) -> Result<i32> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: RunReport =
        serde_json::from_str(&text).with_context(|| format!("{} is not a machine record", path.display()))?;
    print!("{}", emit_report(&report, format.into())?);
    Ok(exit_code(&report))
}
