use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Judge, JudgeError, JudgeRequest, JudgeResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpJudgeConfig {
    /// Full chat-completions URL, e.g. `https://api.example.com/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout: Duration,
    /// Retries after the first attempt on timeouts, 429 and 5xx.
    pub retry_budget: u32,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub max_in_flight: usize,
    pub system_message: String,
}

impl Default for HttpJudgeConfig {
    fn default() -> Self {
        HttpJudgeConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(60),
            retry_budget: 4,
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(20),
            max_in_flight: 8,
            system_message: "You are a careful evaluator. Respond ONLY with valid JSON.".into(),
        }
    }
}

/// Counting gate on concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            limit: limit.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().expect("in-flight lock poisoned");
        while *busy >= self.limit {
            busy = self.freed.wait(busy).expect("in-flight lock poisoned");
        }
        *busy += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().expect("in-flight lock poisoned");
        *busy -= 1;
        self.0.freed.notify_one();
    }
}

enum Failure {
    Transient(String),
    Fatal(String),
}

/// Chat-completion judge over HTTP with bounded retries.
pub struct HttpJudge {
    config: HttpJudgeConfig,
    api_key: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl HttpJudge {
    /// Reads the API key from `config.api_key_env`.
    pub fn new(config: HttpJudgeConfig) -> Result<Self, JudgeError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| JudgeError::AuthMissing(config.api_key_env.clone()))?;
        Ok(Self::with_api_key(config, key))
    }

    pub fn with_api_key(config: HttpJudgeConfig, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpJudge {
            in_flight: InFlight::new(config.max_in_flight),
            api_key: api_key.into(),
            agent,
            config,
        }
    }

    pub fn config(&self) -> &HttpJudgeConfig {
        &self.config
    }

    /// Request body sent for `req`. The filled prompt is the user message verbatim.
    pub fn body(&self, req: &JudgeRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": self.config.system_message},
                {"role": "user", "content": req.filled_prompt},
            ],
            "temperature": req.temperature,
        })
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.config.backoff_base.as_secs_f64() * 2f64.powi(retry as i32);
        let capped = base.min(self.config.backoff_max.as_secs_f64());
        let jittered = capped * rand::rng().random_range(0.5..=1.0);
        Duration::from_secs_f64(jittered)
    }

    fn attempt_once(&self, body: &Value) -> Result<String, Failure> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => extract_content(&text).ok_or_else(|| {
                Failure::Fatal(format!("response has no choices[0].message.content: {text}"))
            }),
            429 | 500..=599 => Err(Failure::Transient(format!("HTTP {status}"))),
            _ => Err(Failure::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

impl Judge for HttpJudge {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let started = Instant::now();
        let body = self.body(req);
        let attempts = self.config.retry_budget + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt_once(&body) {
                Ok(text) => return Ok(JudgeResponse::new(text, started.elapsed(), attempt)),
                Err(Failure::Fatal(msg)) => return Err(JudgeError::Transport(msg)),
                Err(Failure::Transient(msg)) => {
                    tracing::debug!(attempt, error = %msg, "transient judge failure");
                    last = msg;
                    if attempt < attempts {
                        thread::sleep(self.backoff(attempt - 1));
                    }
                }
            }
        }
        Err(JudgeError::Exhausted { attempts, last })
    }
}
