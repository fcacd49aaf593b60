//! Model gateway: one entry point for chat completions, token log-probabilities
//! and embeddings across providers, with a record/replay cache in front.
//!
//! Every provider call goes through [`Gateway`], which consults the
//! [`ReplayCache`] first. A cached record is never regenerated.

mod cache;
mod http;
mod persona;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::probe::{Probe, ProbeType};

pub use cache::{CacheError, CacheKey, CacheMode, CacheRecord, ReplayCache};
pub use http::HttpProvider;
pub use persona::{
    PersonaConfig, TemplateBank, PERSONA_LOGIT_SCALE, PERSONA_LOG_VOCAB, SYNTHETIC_EMBEDDING_DIM,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("probe `{probe_id}` has no `{language}` variant")]
    MissingVariant { probe_id: String, language: String },
    #[error("provider error for `{model_id}` after {attempts} attempt(s): {message}")]
    Provider {
        model_id: String,
        attempts: u32,
        message: String,
    },
    #[error("replay cache has no record for {0}")]
    CacheMiss(String),
    #[error("model `{model_id}` does not support {capability}")]
    Capability {
        model_id: String,
        capability: &'static str,
    },
    #[error("invalid profile `{model_id}`: {message}")]
    InvalidProfile { model_id: String, message: String },
    #[error("invalid query parameters: {0}")]
    InvalidParams(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "Consider the following scenario: {probe}. What is the best course of action? Explain your reasoning.";
pub const PROBE_PLACEHOLDER: &str = "{probe}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    /// Per-language carrier phrases; languages not listed use `prompt_template`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub template_overrides: BTreeMap<String, String>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}
fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

impl Default for QueryParams {
    fn default() -> Self {
        QueryParams {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            template_overrides: BTreeMap::new(),
        }
    }
}

impl QueryParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be positive".into()));
        }
        for t in std::iter::once(&self.prompt_template).chain(self.template_overrides.values()) {
            if t.matches(PROBE_PLACEHOLDER).count() != 1 {
                return Err(GatewayError::InvalidParams(format!(
                    "template must contain exactly one {PROBE_PLACEHOLDER} placeholder: {t:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn template_for(&self, language: &str) -> &str {
        self.template_overrides
            .get(language)
            .unwrap_or(&self.prompt_template)
    }

    /// Hex SHA-256 of the serialized parameters.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("params serialize").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Substitutes the probe text into the carrier phrase. Nothing else changes.
pub fn render_prompt(
    probe: &Probe,
    language: &str,
    params: &QueryParams,
) -> Result<String, GatewayError> {
    let variant = probe
        .variant(language)
        .ok_or_else(|| GatewayError::MissingVariant {
            probe_id: probe.id.clone(),
            language: language.to_string(),
        })?;
    Ok(params
        .template_for(language)
        .replacen(PROBE_PLACEHOLDER, &variant.text, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    SyntheticPersona,
    Replay,
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub model_id: String,
    pub provider_kind: ProviderKind,
    /// Chat-completions URL for `http_chat`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_endpoint: Option<String>,
    /// Model name sent to the provider; defaults to `model_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_model: Option<String>,
    /// Name of the environment variable holding the bearer credential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default)]
    pub supports_embeddings: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<PersonaConfig>,
    /// Cache file for `replay` profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
}

impl ModelProfile {
    pub fn synthetic(model_id: impl Into<String>, persona: PersonaConfig) -> Self {
        ModelProfile {
            model_id: model_id.into(),
            provider_kind: ProviderKind::SyntheticPersona,
            endpoint: None,
            embedding_endpoint: None,
            api_model: None,
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            supports_logprobs: true,
            supports_embeddings: true,
            persona: Some(persona),
            cache_path: None,
        }
    }

    pub fn http(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ModelProfile {
            model_id: model_id.into(),
            provider_kind: ProviderKind::HttpChat,
            endpoint: Some(endpoint.into()),
            embedding_endpoint: None,
            api_model: None,
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            supports_logprobs: false,
            supports_embeddings: false,
            persona: None,
            cache_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |message: &str| GatewayError::InvalidProfile {
            model_id: self.model_id.clone(),
            message: message.to_string(),
        };
        if self.model_id.trim().is_empty() {
            return Err(invalid("empty model_id"));
        }
        match self.provider_kind {
            ProviderKind::HttpChat if self.endpoint.is_none() => {
                Err(invalid("http_chat requires an endpoint"))
            }
            ProviderKind::HttpChat if self.supports_embeddings && self.embedding_endpoint.is_none() => {
                Err(invalid("supports_embeddings requires an embedding_endpoint"))
            }
            ProviderKind::Replay if self.cache_path.is_none() => {
                Err(invalid("replay requires a cache_path"))
            }
            ProviderKind::SyntheticPersona => match &self.persona {
                None => Err(invalid("synthetic_persona requires a persona block")),
                Some(p) => p.validate().map_err(|m| invalid(&m)),
            },
            _ => Ok(()),
        }
    }
}

/// Identifies one response inside a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResponseKey {
    pub model_id: String,
    pub probe_id: String,
    pub language: String,
    #[serde(default)]
    pub sample: u32,
}

impl ResponseKey {
    /// Opaque identifier safe to show annotators.
    pub fn item_id(&self) -> String {
        let encoded = serde_json::to_string(self).expect("key serializes");
        sha256_hex(encoded.as_bytes())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub probe_id: String,
    pub model_id: String,
    pub language: String,
    #[serde(default)]
    pub sample: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<BTreeMap<String, f64>>,
    /// Words in `token_logprobs` scored from a partial token or the floor value.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub approximated_logprobs: BTreeSet<String>,
    pub created_at: DateTime<Utc>,
    pub params_digest: String,
    /// Planted pole level of synthetic responses. Never shown to annotators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<f64>,
}

impl ModelResponse {
    pub fn key(&self) -> ResponseKey {
        ResponseKey {
            model_id: self.model_id.clone(),
            probe_id: self.probe_id.clone(),
            language: self.language.clone(),
            sample: self.sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f64>,
}

/// Log-probabilities for requested words plus how each was obtained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogprobResult {
    pub logprobs: BTreeMap<String, f64>,
    /// Words scored by the log-probability of their first token only.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub multi_token: BTreeSet<String>,
    /// Words absent from the provider's top candidates; assigned the lowest
    /// observed log-probability as an upper bound.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub floored: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

/// Dispatches queries to providers behind a replay cache.
///
/// `provider_calls` counts every cache miss that reached a provider, synthetic
/// or remote.
#[derive(Debug)]
pub struct Gateway {
    replay_only: bool,
    retry: RetryPolicy,
    provider_calls: AtomicU64,
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(false)
    }
}

impl Gateway {
    pub fn new(replay_only: bool) -> Self {
        Gateway {
            replay_only,
            retry: RetryPolicy::default(),
            provider_calls: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn provider_calls(&self) -> u64 {
        self.provider_calls.load(Ordering::Relaxed)
    }

    fn live_allowed(&self, profile: &ModelProfile, what: &str) -> Result<(), GatewayError> {
        if self.replay_only || profile.provider_kind == ProviderKind::Replay {
            return Err(GatewayError::CacheMiss(what.to_string()));
        }
        Ok(())
    }

    fn http(&self, profile: &ModelProfile) -> HttpProvider {
        HttpProvider::new(profile, self.retry)
    }

    /// Returns the response for one (probe, language, sample), from cache when present.
    pub fn query_model(
        &self,
        profile: &ModelProfile,
        probe: &Probe,
        language: &str,
        params: &QueryParams,
        sample: u32,
        cache: &ReplayCache,
    ) -> Result<ModelResponse, GatewayError> {
        params.validate()?;
        let prompt = render_prompt(probe, language, params)?;
        let key = CacheKey::Response {
            model_id: profile.model_id.clone(),
            probe_id: probe.id.clone(),
            language: language.to_string(),
            sample,
            params_digest: params.digest(),
        };
        if let Some(CacheRecord::Response { response, .. }) = cache.get(&key)? {
            return Ok(response);
        }
        self.live_allowed(profile, &key.describe())?;
        profile.validate()?;

        self.provider_calls.fetch_add(1, Ordering::Relaxed);
        let (text, ground_truth) = match profile.provider_kind {
            ProviderKind::SyntheticPersona => {
                let persona = profile.persona.as_ref().expect("validated");
                let out = persona.respond(probe, language, sample);
                (out.text, Some(out.level as f64))
            }
            ProviderKind::HttpChat => (self.http(profile).chat(&prompt, params)?, None),
            ProviderKind::Replay => unreachable!("replay profiles never reach a provider"),
        };
        if text.trim().is_empty() {
            return Err(GatewayError::Provider {
                model_id: profile.model_id.clone(),
                attempts: 1,
                message: "empty response body".into(),
            });
        }
        let response = ModelResponse {
            probe_id: probe.id.clone(),
            model_id: profile.model_id.clone(),
            language: language.to_string(),
            sample,
            text,
            token_logprobs: None,
            approximated_logprobs: Default::default(),
            created_at: Utc::now(),
            params_digest: params.digest(),
            ground_truth,
        };
        cache.put(&CacheRecord::Response {
            key,
            response: response.clone(),
        })?;
        Ok(response)
    }

    /// Log-probability of each target word as the next token after `prompt`.
    pub fn query_logprobs(
        &self,
        profile: &ModelProfile,
        prompt: &str,
        target_words: &[String],
        cache: &ReplayCache,
    ) -> Result<LogprobResult, GatewayError> {
        if !profile.supports_logprobs {
            return Err(GatewayError::Capability {
                model_id: profile.model_id.clone(),
                capability: "token log-probabilities",
            });
        }
        let words: BTreeSet<&String> = target_words.iter().collect();
        let key = CacheKey::Logprobs {
            model_id: profile.model_id.clone(),
            prompt_digest: sha256_hex(prompt.as_bytes()),
            words_digest: sha256_hex(
                serde_json::to_string(&words).expect("words serialize").as_bytes(),
            ),
        };
        if let Some(CacheRecord::Logprobs { result, .. }) = cache.get(&key)? {
            return Ok(result);
        }
        self.live_allowed(profile, &key.describe())?;
        profile.validate()?;
        self.provider_calls.fetch_add(1, Ordering::Relaxed);
        let result = match profile.provider_kind {
            ProviderKind::SyntheticPersona => LogprobResult {
                logprobs: profile
                    .persona
                    .as_ref()
                    .expect("validated")
                    .logprobs(target_words),
                ..Default::default()
            },
            ProviderKind::HttpChat => self.http(profile).logprobs(prompt, target_words)?,
            ProviderKind::Replay => unreachable!("replay profiles never reach a provider"),
        };
        cache.put(&CacheRecord::Logprobs {
            key,
            result: result.clone(),
        })?;
        Ok(result)
    }

    pub fn embed_text(
        &self,
        profile: &ModelProfile,
        text: &str,
        cache: &ReplayCache,
    ) -> Result<EmbeddingVector, GatewayError> {
        if !profile.supports_embeddings {
            return Err(GatewayError::Capability {
                model_id: profile.model_id.clone(),
                capability: "embeddings",
            });
        }
        if text.trim().is_empty() {
            return Err(GatewayError::Precondition("cannot embed empty text".into()));
        }
        let key = CacheKey::Embedding {
            model_id: profile.model_id.clone(),
            text_digest: sha256_hex(text.as_bytes()),
        };
        if let Some(CacheRecord::Embedding { vector, .. }) = cache.get(&key)? {
            return Ok(vector);
        }
        self.live_allowed(profile, &key.describe())?;
        profile.validate()?;
        self.provider_calls.fetch_add(1, Ordering::Relaxed);
        let values = match profile.provider_kind {
            ProviderKind::SyntheticPersona => persona::synthetic_embedding(text),
            ProviderKind::HttpChat => self.http(profile).embed(text)?,
            ProviderKind::Replay => unreachable!("replay profiles never reach a provider"),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::Provider {
                model_id: profile.model_id.clone(),
                attempts: 1,
                message: "non-finite embedding entry".into(),
            });
        }
        let vector = EmbeddingVector {
            model_id: profile.model_id.clone(),
            values,
        };
        cache.put(&CacheRecord::Embedding {
            key,
            vector: vector.clone(),
        })?;
        Ok(vector)
    }
}

/// True when the probe type is answered by completion rather than free text.
pub fn is_completion_probe(probe_type: ProbeType) -> bool {
    probe_type == ProbeType::Sap
}
