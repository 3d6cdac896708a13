//! Client for chat-completions style vision endpoints that return token
//! log-probabilities (OpenAI-compatible schema).

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{AnnotatorBackend, PromptKind};
use crate::env::{render, State, DEFAULT_FRAME_SIZE};
use crate::error::{Result, SfbcError};

/// Upper bound on images per request.
pub const MAX_FRAMES: usize = 16;

pub const ENV_ENDPOINT_URL: &str = "ENDPOINT_URL";
pub const ENV_MODEL: &str = "MODEL";
pub const ENV_API_KEY: &str = "API_KEY";

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub api_key: String,
    pub top_logprobs: u32,
    pub frame_size: u32,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub requests_per_minute: Option<u32>,
}

impl EndpointConfig {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Result<Self> {
        let cfg = EndpointConfig {
            url: url.into(),
            model: model.into(),
            api_key: api_key.into(),
            top_logprobs: 20,
            frame_size: DEFAULT_FRAME_SIZE,
            timeout: Duration::from_secs(60),
            max_attempts: 5,
            initial_backoff: Duration::from_millis(500),
            requests_per_minute: None,
        };
        for (name, value) in [
            (ENV_ENDPOINT_URL, &cfg.url),
            (ENV_MODEL, &cfg.model),
            (ENV_API_KEY, &cfg.api_key),
        ] {
            if value.trim().is_empty() {
                return Err(SfbcError::Config(format!("{name} is empty")));
            }
        }
        Ok(cfg)
    }

    /// Fills unset arguments from `ENDPOINT_URL`, `MODEL` and `API_KEY`.
    pub fn resolve(url: Option<String>, model: Option<String>, api_key: Option<String>) -> Result<Self> {
        let pick = |given: Option<String>, var: &str| {
            given
                .or_else(|| std::env::var(var).ok())
                .filter(|v| !v.trim().is_empty())
                .ok_or_else(|| SfbcError::Config(format!("{var} not set")))
        };
        Self::new(
            pick(url, ENV_ENDPOINT_URL)?,
            pick(model, ENV_MODEL)?,
            pick(api_key, ENV_API_KEY)?,
        )
    }
}

/// Failure below the HTTP status level (connection, timeout, ...). Always retried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

/// Sends one JSON request and returns `(status, body)`.
pub trait ChatTransport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<(u16, String), TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl ChatTransport for HttpTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<(u16, String), TransportError> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", format!("Bearer {api_key}"))
            .send_json(body)
            .map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok((status, text))
    }
}

/// Spaces requests to honor a requests-per-minute budget across threads.
#[derive(Debug)]
struct Throttle {
    interval: Option<Duration>,
    next: Mutex<Option<Instant>>,
}

impl Throttle {
    fn new(requests_per_minute: Option<u32>) -> Self {
        Throttle {
            interval: requests_per_minute
                .filter(|&r| r > 0)
                .map(|r| Duration::from_secs(60) / r),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut next = self.next.lock().expect("throttle lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + interval);
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

pub struct RemoteBackend<T: ChatTransport = HttpTransport> {
    cfg: EndpointConfig,
    transport: T,
    throttle: Throttle,
}

impl RemoteBackend<HttpTransport> {
    pub fn new(cfg: EndpointConfig) -> Self {
        let transport = HttpTransport::new(cfg.timeout);
        Self::with_transport(cfg, transport)
    }
}

impl<T: ChatTransport> RemoteBackend<T> {
    pub fn with_transport(cfg: EndpointConfig, transport: T) -> Self {
        let throttle = Throttle::new(cfg.requests_per_minute);
        RemoteBackend {
            cfg,
            transport,
            throttle,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Request body: the prompt, then one PNG data URL per frame; a single
    /// generated token with its top alternatives.
    pub fn request_body(&self, states: &[State], prompt: &str) -> Result<Value> {
        let mut content = vec![json!({ "type": "text", "text": prompt })];
        for s in states {
            let png = render(s, self.cfg.frame_size, self.cfg.frame_size)?.encode_png()?;
            let data = base64::engine::general_purpose::STANDARD.encode(png);
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{data}") }
            }));
        }
        Ok(json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": content }],
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": true,
            "top_logprobs": self.cfg.top_logprobs,
        }))
    }

    fn send_with_retry(&self, body: &Value) -> Result<Value> {
        let attempts = self.cfg.max_attempts.max(1);
        let mut backoff = self.cfg.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            self.throttle.acquire();
            match self.transport.post_json(&self.cfg.url, &self.cfg.api_key, body) {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return serde_json::from_str(&text).map_err(|e| {
                        SfbcError::UnsuitableEndpoint(format!("response is not JSON: {e}"))
                    });
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    last_error = format!("HTTP {status}: {}", truncate(&text));
                }
                Ok((status, text)) => {
                    return Err(SfbcError::Backend(format!("HTTP {status}: {}", truncate(&text))));
                }
                Err(TransportError(e)) => last_error = e,
            }
            if attempt < attempts {
                thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(SfbcError::Backend(format!(
            "giving up after {attempts} attempts: {last_error}"
        )))
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Sums the probabilities of first-token candidates reading "n" or "no"
/// (case-insensitive, surrounding whitespace ignored).
pub fn extract_p_no(response: &Value) -> Result<f64> {
    let top = response
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| {
            SfbcError::UnsuitableEndpoint("response carries no first-token top_logprobs".into())
        })?;
    let mut p_no = 0.0;
    for candidate in top {
        let token = candidate.get("token").and_then(Value::as_str);
        let logprob = candidate.get("logprob").and_then(Value::as_f64);
        let (Some(token), Some(logprob)) = (token, logprob) else {
            return Err(SfbcError::UnsuitableEndpoint(format!(
                "malformed top_logprobs entry {candidate}"
            )));
        };
        if matches!(token.trim().to_lowercase().as_str(), "n" | "no") {
            p_no += logprob.exp();
        }
    }
    Ok(p_no.clamp(0.0, 1.0))
}

impl<T: ChatTransport> AnnotatorBackend for RemoteBackend<T> {
    fn id(&self) -> String {
        format!("remote:{}", self.cfg.model)
    }

    fn max_states(&self) -> Option<usize> {
        Some(MAX_FRAMES)
    }

    fn score(&self, states: &[State], _kind: PromptKind, prompt: &str) -> Result<f64> {
        if states.is_empty() || states.len() > MAX_FRAMES {
            return Err(SfbcError::InvalidArgument(format!(
                "remote queries take 1..={MAX_FRAMES} frames, got {}",
                states.len()
            )));
        }
        let body = self.request_body(states, prompt)?;
        let response = self.send_with_retry(&body)?;
        extract_p_no(&response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn response(tops: &[(&str, f64)]) -> Value {
        let top: Vec<Value> = tops
            .iter()
            .map(|(t, p)| json!({ "token": t, "logprob": p.ln() }))
            .collect();
        json!({ "choices": [{ "logprobs": { "content": [{ "token": tops[0].0, "top_logprobs": top }] } }] })
    }

    #[test]
    fn summation_rule() {
        let p = extract_p_no(&response(&[("No", 0.8), ("Yes", 0.15), ("n", 0.04)])).unwrap();
        assert!((p - 0.84).abs() < 1e-12);
        assert_eq!(extract_p_no(&response(&[("Y", 1.0)])).unwrap(), 0.0);
    }

    #[test]
    fn missing_logprobs_is_unsuitable() {
        let v = json!({ "choices": [{ "message": { "content": "N" } }] });
        assert!(matches!(extract_p_no(&v), Err(SfbcError::UnsuitableEndpoint(_))));
    }

    struct Scripted {
        replies: Vec<std::result::Result<(u16, String), TransportError>>,
        calls: AtomicUsize,
    }

    impl ChatTransport for Scripted {
        fn post_json(&self, _: &str, _: &str, _: &Value) -> Result<(u16, String), TransportError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }
    }

    fn cfg() -> EndpointConfig {
        let mut c = EndpointConfig::new("http://stub", "stub-model", "key").unwrap();
        c.initial_backoff = Duration::from_millis(1);
        c.frame_size = 64;
        c
    }

    #[test]
    fn transient_errors_are_retried() {
        let ok = response(&[("no", 0.5)]).to_string();
        let backend = RemoteBackend::with_transport(
            cfg(),
            Scripted {
                replies: vec![
                    Err(TransportError("reset".into())),
                    Ok((503, "busy".into())),
                    Ok((429, "slow down".into())),
                    Ok((200, ok)),
                ],
                calls: AtomicUsize::new(0),
            },
        );
        let p = backend.score(&[State::UPRIGHT], PromptKind::Markov, "q").unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!(backend.transport.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn gives_up_after_five_attempts() {
        let backend = RemoteBackend::with_transport(
            cfg(),
            Scripted {
                replies: vec![Ok((500, "down".into()))],
                calls: AtomicUsize::new(0),
            },
        );
        let err = backend.score(&[State::UPRIGHT], PromptKind::Markov, "q").unwrap_err();
        assert!(matches!(err, SfbcError::Backend(_)));
        assert_eq!(backend.transport.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let backend = RemoteBackend::with_transport(
            cfg(),
            Scripted {
                replies: vec![Ok((401, "bad key".into()))],
                calls: AtomicUsize::new(0),
            },
        );
        assert!(backend.score(&[State::UPRIGHT], PromptKind::Markov, "q").is_err());
        assert_eq!(backend.transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn request_layout() {
        let backend = RemoteBackend::with_transport(
            cfg(),
            Scripted {
                replies: vec![],
                calls: AtomicUsize::new(0),
            },
        );
        let body = backend
            .request_body(&[State::UPRIGHT, State::HANGING], "prompt text")
            .unwrap();
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 3);
        assert_eq!(content[0]["text"], "prompt text");
        assert!(content[1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png;base64,"));
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["model"], "stub-model");
    }

    #[test]
    fn frame_count_limits() {
        let backend = RemoteBackend::with_transport(
            cfg(),
            Scripted {
                replies: vec![],
                calls: AtomicUsize::new(0),
            },
        );
        assert!(backend.score(&[], PromptKind::Markov, "q").is_err());
        assert!(backend
            .score(&[State::UPRIGHT; 17], PromptKind::Markov, "q")
            .is_err());
    }

    #[test]
    fn missing_settings_are_config_errors() {
        assert!(matches!(
            EndpointConfig::new("http://x", "", "k"),
            Err(SfbcError::Config(_))
        ));
        let err = EndpointConfig::resolve(Some("http://x".into()), Some("m".into()), Some(" ".into()));
        assert!(matches!(err, Err(SfbcError::Config(_))));
    }

    #[test]
    fn throttle_spaces_requests() {
        let t = Throttle::new(Some(6000));
        let start = Instant::now();
        for _ in 0..4 {
            t.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(25));
    }
}
