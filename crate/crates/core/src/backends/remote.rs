use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::debug;

use super::{Backend, BackendCapabilities, BackendError, ImageRef};
use crate::trainer::PromptTemplate;

/// Connection settings for a chat-completion style vision endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    /// Bearer token. Load it from the environment, never from config files.
    #[serde(skip)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Base delay; attempt `n` waits `backoff_ms * 2^n`.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub max_image_pixels: Option<u64>,
    /// Base directory for relative image references.
    #[serde(default)]
    pub images_root: Option<PathBuf>,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_max_tokens() -> u32 {
    64
}

impl RemoteConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            max_tokens: default_max_tokens(),
            max_image_pixels: None,
            images_root: None,
        }
    }
}

/// Inference-only client. Each `predict` is an independent request, so
/// concurrent calls never share mutable state.
pub struct RemoteClient {
    config: RemoteConfig,
    template: PromptTemplate,
    http: reqwest::blocking::Client,
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl RemoteClient {
    pub fn new(config: RemoteConfig, template: PromptTemplate) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Format(format!("http client: {e}")))?;
        Ok(Self { config, template, http })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn image_url(&self, uri: &str) -> Result<String, BackendError> {
        if ["http://", "https://", "data:"].iter().any(|p| uri.starts_with(p)) {
            return Ok(uri.to_string());
        }
        let path = match &self.config.images_root {
            Some(root) if Path::new(uri).is_relative() => root.join(uri),
            _ => PathBuf::from(uri),
        };
        let path = path.as_path();
        let bytes = fs::read(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mime = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "image/png",
        };
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{mime};base64,{b64}"))
    }

    fn request_body(&self, image_url: &str, instruction: &str) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": image_url}},
                    {"type": "text", "text": self.template.render_text_only(instruction)},
                ],
            }],
            "max_tokens": self.config.max_tokens,
            "temperature": 0.0,
        })
    }

    fn attempt(&self, body: &Value, retries: u32) -> Result<String, Attempt> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout { retries })
            } else {
                Attempt::Retry(BackendError::Transport {
                    message: e.to_string(),
                    retries,
                })
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let err = BackendError::Transport {
                message: format!("HTTP {status}"),
                retries,
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let value: Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout { retries })
            } else {
                Attempt::Fatal(BackendError::Format(format!("bad response body: {e}")))
            }
        })?;
        first_message_text(&value)
            .ok_or_else(|| Attempt::Fatal(BackendError::Format("response has no message text".into())))
    }
}

/// Text of `choices[0].message.content`, which may be a string or a list of
/// typed parts.
fn first_message_text(v: &Value) -> Option<String> {
    let content = v.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl Backend for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            trainable: false,
            supports_adapter_merge: false,
            max_image_pixels: self.config.max_image_pixels,
        }
    }

    fn predict(&self, image: &ImageRef<'_>, instruction: &str) -> Result<String, BackendError> {
        self.check_image(image)?;
        let body = self.request_body(&self.image_url(image.uri)?, instruction);
        let mut retries = 0;
        loop {
            match self.attempt(&body, retries) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if retries >= self.config.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    debug!(%e, retries, "retrying request");
                    let wait = self.config.backoff_ms.saturating_mul(1 << retries.min(16));
                    std::thread::sleep(Duration::from_millis(wait));
                    retries += 1;
                }
            }
        }
    }
}
