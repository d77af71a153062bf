use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{Backend, BackendCapabilities, BackendError, ImageRef};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptReply {
    Text(String),
    /// Simulated transport failure with this message.
    Fail(String),
}

impl ScriptReply {
    fn to_result(&self) -> Result<String, BackendError> {
        match self {
            ScriptReply::Text(t) => Ok(t.clone()),
            ScriptReply::Fail(m) => Err(BackendError::Transport {
                message: m.clone(),
                retries: 0,
            }),
        }
    }
}

/// Replays canned answers, either in call order or keyed by
/// `(image_ref, instruction)`. Keyed scripts are safe under concurrent
/// evaluation; queue scripts depend on call order.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ScriptReply>>,
    keyed: HashMap<(String, String), ScriptReply>,
}

#[derive(Deserialize)]
struct ScriptLine {
    image_ref: String,
    instruction: String,
    #[serde(default)]
    reply: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

impl ScriptedBackend {
    pub fn from_queue<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_replies(replies.into_iter().map(|s| ScriptReply::Text(s.into())))
    }

    pub fn from_replies(replies: impl IntoIterator<Item = ScriptReply>) -> Self {
        Self {
            queue: Mutex::new(replies.into_iter().collect()),
            keyed: HashMap::new(),
        }
    }

    pub fn keyed(map: HashMap<(String, String), ScriptReply>) -> Self {
        Self {
            queue: Mutex::default(),
            keyed: map,
        }
    }

    /// Load a keyed script: one JSON object per line with `image_ref`,
    /// `instruction` and either `reply` or `error`.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|source| BackendError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ScriptLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let reply = match (rec.reply, rec.error) {
                (Some(r), None) => ScriptReply::Text(r),
                (None, Some(e)) => ScriptReply::Fail(e),
                _ => {
                    return Err(BackendError::Format(format!(
                        "{}:{}: exactly one of `reply` or `error` is required",
                        path.display(),
                        i + 1
                    )))
                }
            };
            map.insert((rec.image_ref, rec.instruction), reply);
        }
        Ok(Self::keyed(map))
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            trainable: false,
            supports_adapter_merge: false,
            max_image_pixels: None,
        }
    }

    fn predict(&self, image: &ImageRef<'_>, instruction: &str) -> Result<String, BackendError> {
        if let Some(r) = self.keyed.get(&(image.uri.to_string(), instruction.to_string())) {
            return r.to_result();
        }
        let next = self.queue.lock().expect("script queue poisoned").pop_front();
        next.ok_or(BackendError::QueueExhausted)?.to_result()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMG: ImageRef<'static> = ImageRef {
        uri: "a.png",
        width: 1024,
        height: 768,
    };

    #[test]
    fn queue_then_exhausted() {
        let b = ScriptedBackend::from_queue(["(512, 384)"]);
        assert_eq!(b.predict(&IMG, "x").unwrap(), "(512, 384)");
        assert!(matches!(b.predict(&IMG, "x"), Err(BackendError::QueueExhausted)));
    }

    #[test]
    fn keyed_replies_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        fs::write(
            &p,
            "{\"image_ref\":\"a.png\",\"instruction\":\"ok\",\"reply\":\"(1, 2)\"}\n\
             {\"image_ref\":\"a.png\",\"instruction\":\"bad\",\"error\":\"boom\"}\n",
        )
        .unwrap();
        let b = ScriptedBackend::load(&p).unwrap();
        assert_eq!(b.predict(&IMG, "ok").unwrap(), "(1, 2)");
        assert!(b.predict(&IMG, "bad").unwrap_err().is_transport());
        assert!(matches!(b.predict(&IMG, "other"), Err(BackendError::QueueExhausted)));
    }

    #[test]
    fn not_trainable() {
        let mut b = ScriptedBackend::default();
        assert!(matches!(b.train_step(&[], 1e-4), Err(BackendError::Capability(_))));
    }
}
