//! Project configuration: one TOML document pointing at the task registry,
//! guideline files, endpoint definitions, and dataset bindings. Relative
//! paths resolve against the config file's directory. Secrets never appear
//! here; endpoints name environment variables instead.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, sample_fixed, CorpusError, FieldMapping, LabeledDataset, Split};
use crate::guideline::Guideline;
use crate::modelclient::EndpointConfig;
use crate::taxonomy::{TaskRegistry, TaskSpec};

use super::RunnerError;

/// Root config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    /// Task registry JSONL; omit to use the built-in catalog.
    #[serde(default)]
    pub tasks: Option<PathBuf>,
    /// Directory of guideline TOML files, `<guideline_id>.toml`.
    pub guidelines_dir: PathBuf,
    /// Endpoint definitions TOML.
    pub endpoints: PathBuf,
    /// Dataset manifest TOML.
    pub datasets: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

/// Binds one task to its data file, field mapping, and guideline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBinding {
    pub task_id: String,
    pub path: PathBuf,
    pub guideline_id: String,
    pub mapping: FieldMapping,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Evaluate on a fixed-size uniform sample instead of the whole file.
    #[serde(default)]
    pub take: Option<usize>,
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub datasets: Vec<DatasetBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointsFile {
    pub endpoints: Vec<EndpointConfig>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::Config {
        message: format!("reading {}: {e}", path.display()),
    })?;
    toml::from_str(&text).map_err(|e| RunnerError::Config {
        message: format!("{}: {e}", path.display()),
    })
}

/// Loads the project config and resolves its paths against the config file's
/// parent directory.
pub fn load_project(path: &Path) -> Result<ProjectConfig, RunnerError> {
    let mut cfg: ProjectConfig = read_toml(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
    cfg.tasks = cfg.tasks.as_ref().map(&resolve);
    cfg.guidelines_dir = resolve(&cfg.guidelines_dir);
    cfg.endpoints = resolve(&cfg.endpoints);
    cfg.datasets = resolve(&cfg.datasets);
    cfg.cache_dir = cfg.cache_dir.as_ref().map(&resolve);
    Ok(cfg)
}

pub fn load_endpoints(path: &Path) -> Result<Vec<EndpointConfig>, RunnerError> {
    Ok(read_toml::<EndpointsFile>(path)?.endpoints)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, RunnerError> {
    read_toml(path)
}

/// Task registry from the configured path, or the built-in catalog.
pub fn load_tasks(cfg: &ProjectConfig) -> Result<TaskRegistry, RunnerError> {
    match &cfg.tasks {
        Some(path) => TaskRegistry::load(path)
            .map_err(|e| RunnerError::Config { message: e.to_string() }),
        None => Ok(TaskRegistry::builtin()),
    }
}

pub fn load_guideline(cfg: &ProjectConfig, guideline_id: &str) -> Result<Guideline, RunnerError> {
    let path = cfg.guidelines_dir.join(format!("{guideline_id}.toml"));
    Guideline::load_toml(&path).map_err(|e| RunnerError::Config {
        message: format!("guideline {guideline_id}: {e}"),
    })
}

/// Loads a binding's dataset, resolving its path against `base` and applying
/// the optional fixed-size sample under `seed`.
pub fn load_binding(
    binding: &DatasetBinding,
    base: &Path,
    task: &TaskSpec,
    seed: u64,
) -> Result<LabeledDataset, CorpusError> {
    let path = if binding.path.is_relative() {
        base.join(&binding.path)
    } else {
        binding.path.clone()
    };
    let dataset = load_dataset(&path, &binding.mapping, task, binding.split)?;
    Ok(match binding.take {
        Some(n) => sample_fixed(&dataset, n, seed),
        None => dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_paths_resolve_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        fs::write(
            &path,
            concat!(
                "guidelines_dir = \"guidelines\"\n",
                "endpoints = \"endpoints.toml\"\n",
                "datasets = \"datasets.toml\"\n",
                "cache_dir = \"/abs/cache\"\n",
            ),
        )
        .unwrap();
        let cfg = load_project(&path).unwrap();
        assert_eq!(cfg.guidelines_dir, dir.path().join("guidelines"));
        assert_eq!(cfg.endpoints, dir.path().join("endpoints.toml"));
        assert!(cfg.tasks.is_none());
        assert_eq!(cfg.cache_dir.as_deref(), Some(Path::new("/abs/cache")));
    }

    #[test]
    fn endpoints_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let endpoints = dir.path().join("endpoints.toml");
        fs::write(
            &endpoints,
            concat!(
                "[[endpoints]]\n",
                "endpoint_id = \"mock\"\n",
                "kind = \"chat\"\n",
                "base_url = \"static:Label: 1\"\n",
                "model = \"none\"\n",
            ),
        )
        .unwrap();
        let eps = load_endpoints(&endpoints).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].endpoint_id, "mock");
        assert_eq!(eps[0].decoding.max_tokens, 100, "decoding defaults apply");

        let manifest = dir.path().join("datasets.toml");
        fs::write(
            &manifest,
            concat!(
                "[[datasets]]\n",
                "task_id = \"hatexplain/hate\"\n",
                "path = \"data/hatexplain.jsonl\"\n",
                "guideline_id = \"hate\"\n",
                "take = 500\n",
                "[datasets.mapping]\n",
                "content = \"text\"\n",
                "label = \"label\"\n",
            ),
        )
        .unwrap();
        let m = load_manifest(&manifest).unwrap();
        assert_eq!(m.datasets.len(), 1);
        assert_eq!(m.datasets[0].split, Split::Test, "split defaults to test");
        assert_eq!(m.datasets[0].take, Some(500));
    }

    #[test]
    fn bad_config_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        fs::write(&path, "guidelines_dir = 3\n").unwrap();
        assert!(matches!(
            load_project(&path),
            Err(RunnerError::Config { .. })
        ));
        assert!(matches!(
            load_project(&dir.path().join("missing.toml")),
            Err(RunnerError::Config { .. })
        ));
    }
}
