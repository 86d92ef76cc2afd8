use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{ChatMessage, GatewayConfig, GatewayError, ModelProvider, ModelTask, ProviderKind};

/// Chat-completion client over HTTP(S).
pub struct RemoteProvider {
    agent: ureq::Agent,
    endpoint_url: String,
    model_name: String,
    temperature: f64,
    api_key: Option<String>,
    limiter: TokenBucket,
}

impl RemoteProvider {
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let endpoint_url = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| GatewayError::Config("remote provider needs endpoint_url".into()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint_url,
            model_name: cfg.model_name.clone(),
            temperature: cfg.temperature,
            api_key: std::env::var(&cfg.api_key_env).ok(),
            limiter: TokenBucket::new(cfg.requests_per_minute),
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ModelProvider for RemoteProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Remote
    }

    fn complete(&self, _task: &ModelTask, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        self.limiter.acquire();
        let body = serde_json::json!({
            "model": self.model_name,
            "messages": messages,
            "temperature": self.temperature,
        });
        let mut req = self.agent.post(&self.endpoint_url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if (400..500).contains(&code) && code != 429 => {
                GatewayError::TaskRejected(format!("endpoint returned HTTP {code}"))
            }
            other => GatewayError::ProviderUnreachable(other.to_string()),
        })?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| GatewayError::ProviderUnreachable(format!("unreadable response: {e}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .unwrap_or_default())
    }
}

/// Blocking token bucket refilled continuously at `per_minute` tokens per
/// minute with a burst of the same size.
struct TokenBucket {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(per_minute: u32) -> Self {
        let cap = f64::from(per_minute.max(1));
        Self {
            per_minute: cap,
            state: Mutex::new((cap, Instant::now())),
        }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                let refill = now.duration_since(*last).as_secs_f64() * self.per_minute / 60.0;
                *tokens = (*tokens + refill).min(self.per_minute);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - *tokens) * 60.0 / self.per_minute)
            };
            std::thread::sleep(wait);
        }
    }
}
