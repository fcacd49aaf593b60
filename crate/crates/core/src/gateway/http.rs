//! Adapter for OpenAI-compatible chat-completions and embeddings endpoints.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::{GatewayError, LogprobResult, ModelProfile, QueryParams, RetryPolicy};

const TOP_LOGPROBS: u32 = 20;

pub struct HttpProvider {
    agent: ureq::Agent,
    profile: ModelProfile,
    retry: RetryPolicy,
}

enum Failure {
    /// Worth retrying: transport error, 429 or 5xx.
    Transient(String),
    Fatal(String),
}

impl HttpProvider {
    pub fn new(profile: &ModelProfile, retry: RetryPolicy) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(profile.timeout_secs)))
            .http_status_as_error(false)
            .build();
        HttpProvider {
            agent: ureq::Agent::new_with_config(config),
            profile: profile.clone(),
            retry,
        }
    }

    fn api_model(&self) -> &str {
        self.profile
            .api_model
            .as_deref()
            .unwrap_or(&self.profile.model_id)
    }

    fn error(&self, attempts: u32, message: impl Into<String>) -> GatewayError {
        GatewayError::Provider {
            model_id: self.profile.model_id.clone(),
            attempts,
            message: message.into(),
        }
    }

    fn credential(&self) -> Result<Option<String>, GatewayError> {
        match &self.profile.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| self.error(0, format!("credential variable {var} is not set"))),
        }
    }

    fn post_once(&self, url: &str, body: &Value, key: Option<&str>) -> Result<Value, Failure> {
        let mut req = self.agent.post(url);
        if let Some(k) = key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Transient(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {}", truncate(&text, 300))));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Failure::Fatal(format!("invalid JSON body: {e}")))
    }

    /// POSTs with exponential backoff on transient failures.
    fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let key = self.credential()?;
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            match self.post_once(url, body, key.as_deref()) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(m)) => return Err(self.error(attempt, m)),
                Err(Failure::Transient(m)) => {
                    tracing::warn!(model = %self.profile.model_id, attempt, error = %m, "provider request failed");
                    last = m;
                    if attempt < self.retry.attempts {
                        std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
                    }
                }
            }
        }
        Err(self.error(self.retry.attempts.max(1), last))
    }

    fn chat_url(&self) -> Result<&str, GatewayError> {
        self.profile
            .endpoint
            .as_deref()
            .ok_or_else(|| self.error(0, "no endpoint configured"))
    }

    pub fn chat(&self, prompt: &str, params: &QueryParams) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.api_model(),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let value = self.post(self.chat_url()?, &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.error(1, "response has no choices[0].message.content"))
    }

    /// Scores target words against the first generated token's top candidates.
    pub fn logprobs(&self, prompt: &str, words: &[String]) -> Result<LogprobResult, GatewayError> {
        let body = json!({
            "model": self.api_model(),
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": TOP_LOGPROBS,
        });
        let value = self.post(self.chat_url()?, &body)?;
        let top = value["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
            .as_array()
            .ok_or_else(|| self.error(1, "response carries no top_logprobs"))?;
        let candidates: Vec<(String, f64)> = top
            .iter()
            .filter_map(|c| Some((c["token"].as_str()?.to_string(), c["logprob"].as_f64()?)))
            .collect();
        match_candidates(&candidates, words).ok_or_else(|| self.error(1, "empty top_logprobs"))
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let url = self
            .profile
            .embedding_endpoint
            .as_deref()
            .ok_or_else(|| self.error(0, "no embedding_endpoint configured"))?;
        let body = json!({"model": self.api_model(), "input": text});
        let value = self.post(url, &body)?;
        value["data"][0]["embedding"]
            .as_array()
            .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| self.error(1, "response has no data[0].embedding"))
    }
}

/// Whole-token matches are exact; otherwise the best candidate that is a
/// prefix of the word stands in (flagged multi-token); otherwise the word gets
/// the lowest observed log-probability (flagged floored).
pub(crate) fn match_candidates(candidates: &[(String, f64)], words: &[String]) -> Option<LogprobResult> {
    let floor = candidates.iter().map(|(_, lp)| *lp).reduce(f64::min)?;
    let mut out = LogprobResult {
        logprobs: BTreeMap::new(),
        ..Default::default()
    };
    for word in words {
        let target = word.to_lowercase();
        let norm = |t: &str| t.trim().to_lowercase();
        let exact = candidates
            .iter()
            .filter(|(t, _)| norm(t) == target)
            .map(|(_, lp)| *lp)
            .reduce(f64::max);
        if let Some(lp) = exact {
            out.logprobs.insert(word.clone(), lp);
            continue;
        }
        let prefix = candidates
            .iter()
            .filter(|(t, _)| {
                let t = norm(t);
                !t.is_empty() && target.starts_with(&t)
            })
            .map(|(_, lp)| *lp)
            .reduce(f64::max);
        match prefix {
            Some(lp) => {
                out.logprobs.insert(word.clone(), lp);
                out.multi_token.insert(word.clone());
            }
            None => {
                out.logprobs.insert(word.clone(), floor);
                out.floored.insert(word.clone());
            }
        }
    }
    Some(out)
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
