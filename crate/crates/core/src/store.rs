//! Run manifests and the on-disk run directory.
//!
//! A run directory holds `manifest.json` plus append-only logs
//! (`responses.jsonl`, `annotations.jsonl`, `embeddings.jsonl`), the replay
//! cache (`cache.jsonl` unless the manifest names another file) and the
//! rendered `report.json` / `report.md`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationError, AnnotationRecord, AnnotatorSpec};
use crate::gateway::{
    CacheError, CacheMode, GatewayError, ModelProfile, ModelResponse, QueryParams, ReplayCache,
    ResponseKey,
};
use crate::jsonl::{read_jsonl, JsonlAppender, JsonlError};
use crate::metrics::{self, HofstedeAnchor, LexiconSet, MetricsError};
use crate::probe::{load_dataset, ProbeDataset, ProbeError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const CACHE_FILE: &str = "cache.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_MD_FILE: &str = "report.md";

pub const DEFAULT_MIN_ANNOTATIONS: usize = 3;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] ProbeError),
    #[error("dataset digest mismatch for {path}: manifest has {expected}, file has {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid report: {message}")]
    Report { path: String, message: String },
    #[error("run has no responses to annotate")]
    EmptyRun,
}

impl StoreError {
    /// 1 for invalid input, 2 for runtime and provider failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            StoreError::Gateway(GatewayError::InvalidProfile { .. })
            | StoreError::Gateway(GatewayError::InvalidParams(_)) => 1,
            StoreError::Gateway(_)
            | StoreError::Log(_)
            | StoreError::Cache(_)
            | StoreError::Io { .. } => 2,
            StoreError::Dataset(ProbeError::Io { .. }) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBinding {
    /// Relative paths resolve against the run directory.
    pub path: PathBuf,
    /// Hex SHA-256 of the dataset file bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    #[serde(default)]
    pub roster: Vec<AnnotatorSpec>,
    #[serde(default = "default_min_annotations")]
    pub min_annotations: usize,
    pub session_seed: u64,
}

fn default_min_annotations() -> usize {
    DEFAULT_MIN_ANNOTATIONS
}

fn default_languages() -> Vec<String> {
    vec!["en".into()]
}

fn default_samples() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: DatasetBinding,
    /// Manifest order fixes the comparison order in the report.
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub params: QueryParams,
    #[serde(default = "default_languages")]
    pub languages: Vec<String>,
    /// Responses drawn per (model, probe, language).
    #[serde(default = "default_samples")]
    pub samples: u32,
    pub annotation: AnnotationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicons_path: Option<PathBuf>,
    /// Concept words for the embedding similarity panel.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<String>,
    /// Query next-token log-probabilities of the lexicon words per response.
    #[serde(default)]
    pub preference_panel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
}

impl RunManifest {
    pub fn parse(text: &str, origin: &str) -> Result<Self, StoreError> {
        let manifest: RunManifest =
            serde_json::from_str(text).map_err(|e| StoreError::Manifest {
                path: origin.to_string(),
                message: e.to_string(),
            })?;
        manifest.validate(origin)?;
        Ok(manifest)
    }

    pub fn validate(&self, origin: &str) -> Result<(), StoreError> {
        let bad = |message: String| StoreError::Manifest {
            path: origin.to_string(),
            message,
        };
        if self.run_id.trim().is_empty() {
            return Err(bad("empty run_id".into()));
        }
        if self.models.is_empty() {
            return Err(bad("no models".into()));
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(m.model_id.as_str()) {
                return Err(bad(format!("duplicate model_id `{}`", m.model_id)));
            }
            m.validate()?;
        }
        self.params.validate()?;
        if self.languages.is_empty() {
            return Err(bad("no languages".into()));
        }
        if self.samples == 0 {
            return Err(bad("samples must be at least 1".into()));
        }
        if self.annotation.min_annotations == 0 {
            return Err(bad("min_annotations must be at least 1".into()));
        }
        let mut annotators = HashSet::new();
        for a in &self.annotation.roster {
            if a.id.trim().is_empty() {
                return Err(bad("annotator with empty id".into()));
            }
            if !annotators.insert(a.id.as_str()) {
                return Err(bad(format!("duplicate annotator `{}`", a.id)));
            }
        }
        if self.parallelism == Some(0) {
            return Err(bad("parallelism must be at least 1".into()));
        }
        if self.dataset.digest.len() != 64 || !self.dataset.digest.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(bad("dataset.digest must be a hex SHA-256".into()));
        }
        Ok(())
    }

    pub fn model(&self, model_id: &str) -> Option<&ModelProfile> {
        self.models.iter().find(|m| m.model_id == model_id)
    }
}

/// What a stored embedding belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSubject {
    Response { response_ref: ResponseKey },
    Concept { concept: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub model_id: String,
    pub subject: EmbeddingSubject,
    pub values: Vec<f64>,
}

pub fn sha256_file(path: &Path) -> Result<String, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(crate::gateway::sha256_hex(&bytes))
}

/// An opened run directory with its parsed manifest.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    manifest_digest: String,
}

impl RunStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| StoreError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let manifest = RunManifest::parse(&text, &path.display().to_string())?;
        Ok(RunStore {
            dir,
            manifest,
            manifest_digest: crate::gateway::sha256_hex(&bytes),
        })
    }

    /// Opens the run a manifest file describes. The run directory is the
    /// manifest's parent; a manifest stored under another name is copied to
    /// `manifest.json` there, unless a different `manifest.json` exists.
    pub fn from_manifest_file(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        if path.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_FILE) {
            let given = std::fs::read(path).map_err(io_err(path))?;
            let target = dir.join(MANIFEST_FILE);
            match std::fs::read(&target) {
                Ok(existing) if existing != given => {
                    return Err(StoreError::Manifest {
                        path: path.display().to_string(),
                        message: format!("{} already holds a different manifest", target.display()),
                    })
                }
                Ok(_) => {}
                Err(_) => std::fs::write(&target, &given).map_err(io_err(&target))?,
            }
        }
        RunStore::open(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn manifest_digest(&self) -> &str {
        &self.manifest_digest
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Loads the dataset after checking it against the manifest digest.
    pub fn dataset(&self) -> Result<ProbeDataset, StoreError> {
        let path = self.resolve(&self.manifest.dataset.path);
        let actual = sha256_file(&path)?;
        if !actual.eq_ignore_ascii_case(&self.manifest.dataset.digest) {
            return Err(StoreError::DigestMismatch {
                path: path.display().to_string(),
                expected: self.manifest.dataset.digest.clone(),
                actual,
            });
        }
        Ok(load_dataset(&path)?)
    }

    pub fn anchors(&self) -> Result<Vec<HofstedeAnchor>, StoreError> {
        Ok(match &self.manifest.anchors_path {
            Some(p) => metrics::load_anchors(self.resolve(p))?,
            None => metrics::default_anchors(),
        })
    }

    pub fn lexicons(&self) -> Result<LexiconSet, StoreError> {
        Ok(match &self.manifest.lexicons_path {
            Some(p) => LexiconSet::load(self.resolve(p))?,
            None => LexiconSet::builtin(),
        })
    }

    /// Stored responses in log order; the first record per key wins.
    pub fn responses(&self) -> Result<Vec<ModelResponse>, StoreError> {
        let all: Vec<ModelResponse> = read_jsonl(&self.file(RESPONSES_FILE))?;
        let mut seen = HashSet::new();
        Ok(all.into_iter().filter(|r| seen.insert(r.key())).collect())
    }

    pub fn annotations(&self) -> Result<Vec<AnnotationRecord>, StoreError> {
        Ok(read_jsonl(&self.file(ANNOTATIONS_FILE))?)
    }

    pub fn embeddings(&self) -> Result<Vec<EmbeddingRecord>, StoreError> {
        Ok(read_jsonl(&self.file(EMBEDDINGS_FILE))?)
    }

    pub fn responses_log(&self) -> Result<JsonlAppender, StoreError> {
        Ok(JsonlAppender::open(self.file(RESPONSES_FILE))?)
    }

    pub fn annotations_log(&self) -> Result<JsonlAppender, StoreError> {
        Ok(JsonlAppender::open(self.file(ANNOTATIONS_FILE))?)
    }

    pub fn embeddings_log(&self) -> Result<JsonlAppender, StoreError> {
        Ok(JsonlAppender::open(self.file(EMBEDDINGS_FILE))?)
    }

    pub fn cache_path(&self) -> PathBuf {
        match &self.manifest.cache_path {
            Some(p) => self.resolve(p),
            None => self.file(CACHE_FILE),
        }
    }

    pub fn open_cache(&self, mode: CacheMode) -> Result<ReplayCache, StoreError> {
        Ok(ReplayCache::open(self.cache_path(), mode)?)
    }
}
