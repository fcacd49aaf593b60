use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EmbeddingVector, LogprobResult, ModelResponse};
use crate::jsonl::{read_lines, JsonlAppender, JsonlError};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error("{path}:{line}: unreadable cache record: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cache opened read-only")]
    ReadOnly,
}

/// Lookup key of a cached provider result.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CacheKey {
    Response {
        model_id: String,
        probe_id: String,
        language: String,
        sample: u32,
        params_digest: String,
    },
    Logprobs {
        model_id: String,
        prompt_digest: String,
        words_digest: String,
    },
    Embedding {
        model_id: String,
        text_digest: String,
    },
}

impl CacheKey {
    pub fn describe(&self) -> String {
        match self {
            CacheKey::Response {
                model_id,
                probe_id,
                language,
                sample,
                ..
            } => format!("response {model_id}/{probe_id}/{language}#{sample}"),
            CacheKey::Logprobs { model_id, .. } => format!("logprobs {model_id}"),
            CacheKey::Embedding { model_id, .. } => format!("embedding {model_id}"),
        }
    }
}

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum CacheRecord {
    Response {
        key: CacheKey,
        response: ModelResponse,
    },
    Logprobs {
        key: CacheKey,
        result: LogprobResult,
    },
    Embedding {
        key: CacheKey,
        vector: EmbeddingVector,
    },
}

impl CacheRecord {
    pub fn key(&self) -> &CacheKey {
        match self {
            CacheRecord::Response { key, .. }
            | CacheRecord::Logprobs { key, .. }
            | CacheRecord::Embedding { key, .. } => key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    ReadWrite,
    ReadOnly,
}

/// Append-only record/replay cache.
///
/// The index maps keys to the raw recorded line, so a hit decodes exactly what
/// was written. Readers share the index; writes are serialized through the
/// appender. The first record for a key wins.
#[derive(Debug)]
pub struct ReplayCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<CacheKey, String>>,
    writer: Option<JsonlAppender>,
}

impl ReplayCache {
    pub fn open(path: impl AsRef<Path>, mode: CacheMode) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let writer = match mode {
            // opening the appender first trims a torn tail before indexing
            CacheMode::ReadWrite => Some(JsonlAppender::open(&path)?),
            CacheMode::ReadOnly => None,
        };
        let mut index = HashMap::new();
        for (i, line) in read_lines(&path)?.into_iter().enumerate() {
            let record: CacheRecord =
                serde_json::from_str(&line).map_err(|e| CacheError::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            index.entry(record.key().clone()).or_insert(line);
        }
        Ok(ReplayCache {
            path: Some(path),
            index: RwLock::new(index),
            writer,
        })
    }

    /// Process-local cache with no backing file.
    pub fn in_memory() -> Self {
        ReplayCache {
            path: None,
            index: RwLock::new(HashMap::new()),
            writer: None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.index
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .contains_key(key)
    }

    /// The recorded line for `key`, verbatim.
    pub fn raw(&self, key: &CacheKey) -> Option<String> {
        self.index
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(key)
            .cloned()
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheRecord>, CacheError> {
        let Some(line) = self.raw(key) else {
            return Ok(None);
        };
        serde_json::from_str(&line)
            .map(Some)
            .map_err(|e| CacheError::Record {
                path: self
                    .path
                    .as_ref()
                    .map_or_else(|| "<memory>".into(), |p| p.display().to_string()),
                line: 0,
                message: e.to_string(),
            })
    }

    pub fn put(&self, record: &CacheRecord) -> Result<(), CacheError> {
        let line = serde_json::to_string(record).expect("cache record serializes");
        let mut index = self.index.write().unwrap_or_else(|e| e.into_inner());
        if index.contains_key(record.key()) {
            return Ok(());
        }
        match (&self.writer, &self.path) {
            (Some(w), _) => w.append_raw(&format!("{line}\n"))?,
            (None, Some(_)) => return Err(CacheError::ReadOnly),
            (None, None) => {}
        }
        index.insert(record.key().clone(), line);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn response(probe: &str) -> ModelResponse {
        ModelResponse {
            probe_id: probe.into(),
            model_id: "m".into(),
            language: "en".into(),
            sample: 0,
            text: "an answer".into(),
            token_logprobs: None,
            approximated_logprobs: Default::default(),
            created_at: chrono::Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap(),
            params_digest: "d".into(),
            ground_truth: None,
        }
    }

    fn key(probe: &str) -> CacheKey {
        CacheKey::Response {
            model_id: "m".into(),
            probe_id: probe.into(),
            language: "en".into(),
            sample: 0,
            params_digest: "d".into(),
        }
    }

    #[test]
    fn records_survive_reopen_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ReplayCache::open(&path, CacheMode::ReadWrite).unwrap();
        let rec = CacheRecord::Response {
            key: key("p1"),
            response: response("p1"),
        };
        cache.put(&rec).unwrap();
        let raw = cache.raw(&key("p1")).unwrap();
        drop(cache);

        let reopened = ReplayCache::open(&path, CacheMode::ReadOnly).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.raw(&key("p1")).unwrap(), raw);
        let got = reopened.get(&key("p1")).unwrap().unwrap();
        assert_eq!(serde_json::to_string(&got).unwrap(), raw);
        assert!(reopened.get(&key("p2")).unwrap().is_none());
        assert!(matches!(reopened.put(&rec), Ok(())));
        let other = CacheRecord::Response {
            key: key("p2"),
            response: response("p2"),
        };
        assert!(matches!(reopened.put(&other), Err(CacheError::ReadOnly)));
    }

    #[test]
    fn first_record_wins() {
        let cache = ReplayCache::in_memory();
        let mut r = response("p1");
        cache
            .put(&CacheRecord::Response {
                key: key("p1"),
                response: r.clone(),
            })
            .unwrap();
        r.text = "different".into();
        cache
            .put(&CacheRecord::Response {
                key: key("p1"),
                response: r,
            })
            .unwrap();
        match cache.get(&key("p1")).unwrap().unwrap() {
            CacheRecord::Response { response, .. } => assert_eq!(response.text, "an answer"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn keys_differ_on_every_component() {
        let base = key("p1");
        let variants = [
            CacheKey::Response {
                model_id: "m2".into(),
                probe_id: "p1".into(),
                language: "en".into(),
                sample: 0,
                params_digest: "d".into(),
            },
            CacheKey::Response {
                model_id: "m".into(),
                probe_id: "p1".into(),
                language: "zh-Hans".into(),
                sample: 0,
                params_digest: "d".into(),
            },
            CacheKey::Response {
                model_id: "m".into(),
                probe_id: "p1".into(),
                language: "en".into(),
                sample: 1,
                params_digest: "d".into(),
            },
            CacheKey::Response {
                model_id: "m".into(),
                probe_id: "p1".into(),
                language: "en".into(),
                sample: 0,
                params_digest: "e".into(),
            },
        ];
        for v in variants {
            assert_ne!(base, v);
        }
    }
}
