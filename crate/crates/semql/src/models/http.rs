//! Chat-completions HTTP client (enabled by the `http` feature).

use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    parse_bool_confidence, ModelRequest, ModelResponse, Provider, ProviderError, ProviderStats,
    TaskKind,
};
use crate::data::estimate_tokens;

pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    stats: Mutex<ProviderStats>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl HttpProvider {
    /// `api_key_env` names the environment variable holding the key
    /// (default SEMQL_API_KEY). The key is optional for local endpoints.
    pub fn new(endpoint_url: &str, api_key_env: Option<&str>) -> HttpProvider {
        let env = api_key_env.unwrap_or("SEMQL_API_KEY");
        HttpProvider {
            endpoint: endpoint_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(env).ok(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("client construction cannot fail with static config"),
            stats: Mutex::new(ProviderStats::default()),
        }
    }

    fn build_prompt(req: &ModelRequest) -> String {
        let mut prompt = req.prompt.clone();
        match req.task {
            TaskKind::FilterBool => {
                prompt.push_str(
                    "\n\nAnswer strictly with `true` or `false`, followed by a probability in [0,1].",
                );
            }
            TaskKind::ClassifyMulti => {
                let labels = req.labels.as_deref().unwrap_or(&[]);
                prompt.push_str("\n\nChoose every applicable label from: ");
                prompt.push_str(&labels.join(", "));
                prompt.push_str("\nAnswer with a comma-separated list of labels only.");
            }
            _ => {}
        }
        prompt
    }
}

impl Provider for HttpProvider {
    fn invoke(&self, req: &ModelRequest) -> Result<ModelResponse, ProviderError> {
        req.validate()?;
        let prompt = Self::build_prompt(req);
        let body = json!({
            "model": req.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": req.max_output_tokens,
        });
        let mut builder = self
            .client
            .post(format!("{}/v1/chat/completions", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| ProviderError::transient(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() {
            return Err(ProviderError::transient(format!("http {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::fatal(format!("http {status}")));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| ProviderError::fatal(format!("bad response body: {e}")))?;
        let text = parsed
            .choices
            .first()
            .map(|c| c.message.content.trim().to_string())
            .ok_or_else(|| ProviderError::fatal("response has no choices"))?;

        let mut resp = ModelResponse::text(&text);
        match req.task {
            TaskKind::FilterBool => {
                let (value, confidence) = parse_bool_confidence(&text)?;
                resp.bool_value = Some(value);
                resp.confidence = Some(confidence);
            }
            TaskKind::ClassifyMulti => {
                resp.labels = Some(
                    text.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect(),
                );
            }
            _ => {}
        }
        resp.prompt_tokens = estimate_tokens(&prompt);
        resp.output_tokens = estimate_tokens(&resp.text);
        let mut dropped = 0u64;
        if let (Some(labels), Some(allowed)) = (&mut resp.labels, &req.labels) {
            let before = labels.len();
            labels.retain(|l| allowed.contains(l));
            dropped = (before - labels.len()) as u64;
        }
        let mut stats = self.stats.lock().unwrap();
        let m = stats.per_model.entry(req.model_name.clone()).or_default();
        m.call_count += 1;
        m.total_prompt_tokens += resp.prompt_tokens;
        m.total_output_tokens += resp.output_tokens;
        stats.label_hallucinations += dropped;
        Ok(resp)
    }

    fn stats(&self) -> ProviderStats {
        self.stats.lock().unwrap().clone()
    }
}
