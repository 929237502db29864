//! OpenAI-compatible JSON-over-HTTP backends.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, Embedder, EmbeddingVector, GatewayError};

/// Endpoint settings. The API key is read from `api_key_env` at call time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl RemoteConfig {
    fn agent(&self) -> ureq::Agent {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .build();
        ureq::Agent::new_with_config(config)
    }

    fn api_key(&self) -> Result<Option<String>, GatewayError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| GatewayError::MissingApiKey(var.clone())),
        }
    }

    fn post(&self, agent: &ureq::Agent, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.base_url.trim_end_matches('/'), path);
        let mut req = agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = self.api_key()? {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        if !(200..300).contains(&code) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(GatewayError::Status { code, body });
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| GatewayError::Malformed(e.to_string()))
    }
}

/// `POST {base_url}/chat/completions`.
pub struct HttpChatBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = config.agent();
        Self { config, agent }
    }
}

fn image_url(image_ref: &str) -> Result<String, GatewayError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref);
    let bytes = std::fs::read(path).map_err(|e| GatewayError::InvalidRequest(format!("{image_ref}: {e}")))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

pub(crate) fn chat_body(req: &ChatRequest) -> Result<Value, GatewayError> {
    let user = match &req.image_ref {
        None => json!(req.user_prompt),
        Some(img) => json!([
            {"type": "text", "text": req.user_prompt},
            {"type": "image_url", "image_url": {"url": image_url(img)?}},
        ]),
    };
    let mut messages = Vec::new();
    if !req.system_prompt.is_empty() {
        messages.push(json!({"role": "system", "content": req.system_prompt}));
    }
    messages.push(json!({"role": "user", "content": user}));
    Ok(json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "n": req.n_samples,
    }))
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, GatewayError> {
        let body = chat_body(req)?;
        let resp = self.config.post(&self.agent, "chat/completions", &body)?;
        let choices = resp["choices"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed("missing choices".into()))?;
        choices
            .iter()
            .map(|c| {
                c["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| GatewayError::Malformed("choice without text content".into()))
            })
            .collect()
    }
}

/// `POST {base_url}/embeddings`.
pub struct HttpEmbedder {
    config: RemoteConfig,
    model: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(config: RemoteConfig, model: impl Into<String>) -> Self {
        let agent = config.agent();
        Self {
            config,
            model: model.into(),
            agent,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        self.model.clone()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, GatewayError> {
        let body = json!({"model": self.model, "input": texts});
        let resp = self.config.post(&self.agent, "embeddings", &body)?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed("missing data".into()))?;
        let mut out: Vec<(usize, EmbeddingVector<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let idx = d["index"].as_u64().map(|x| x as usize).unwrap_or(i);
                let values: Vec<f64> = serde_json::from_value(d["embedding"].clone())
                    .map_err(|e| GatewayError::Malformed(e.to_string()))?;
                Ok((idx, EmbeddingVector::normalized(values)?))
            })
            .collect::<Result<_, GatewayError>>()?;
        out.sort_by_key(|(i, _)| *i);
        Ok(out.into_iter().map(|(_, v)| v).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_carries_image_and_samples() {
        let req = ChatRequest::new("m", "sys", "q")
            .with_samples(5)
            .with_image(Some("https://example.org/a.png".into()));
        let body = chat_body(&req).unwrap();
        assert_eq!(body["n"], 5);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"][1]["image_url"]["url"], "https://example.org/a.png");
    }

    #[test]
    fn missing_key_is_reported() {
        let cfg = RemoteConfig {
            base_url: "http://127.0.0.1:9".into(),
            api_key_env: Some("SKILLSLICE_TEST_UNSET_KEY".into()),
            timeout_secs: 1,
        };
        let backend = HttpChatBackend::new(cfg);
        assert_eq!(
            backend.complete(&ChatRequest::new("m", "", "q")),
            Err(GatewayError::MissingApiKey("SKILLSLICE_TEST_UNSET_KEY".into()))
        );
    }

    #[test]
    fn unreachable_endpoint_is_retryable() {
        let cfg = RemoteConfig {
            base_url: "http://127.0.0.1:9".into(),
            api_key_env: None,
            timeout_secs: 2,
        };
        let err = HttpChatBackend::new(cfg)
            .complete(&ChatRequest::new("m", "", "q"))
            .unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }
}
