use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ClientError;

/// Where and how to reach a chat-completion endpoint. The API key itself is
/// never stored here, only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub api_key_env: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Delay before retry `k` (0-based) is `backoff_base_secs · 2^k`.
    pub backoff_base_secs: f64,
    pub max_parallel: usize,
    pub cache_dir: PathBuf,
    pub temperature: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: "MUSC_API_KEY".into(),
            model: "local-model".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_secs: 0.5,
            max_parallel: 4,
            cache_dir: PathBuf::from(".musc-cache"),
            temperature: 0.5,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: String| Err(ClientError::Config(m));
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1".into());
        }
        if !(self.timeout_secs > 0.0) {
            return bad(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        if !(self.backoff_base_secs >= 0.0) {
            return bad(format!("backoff_base_secs must be non-negative, got {}", self.backoff_base_secs));
        }
        if self.api_key_env.is_empty() {
            return bad("api_key_env must name an environment variable".into());
        }
        Ok(())
    }

    /// Reads the key from the configured environment variable.
    pub fn api_key(&self) -> Result<String, ClientError> {
        match std::env::var(&self.api_key_env) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(ClientError::MissingKey(self.api_key_env.clone())),
        }
    }
}
