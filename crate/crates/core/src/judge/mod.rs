//! Judge backends and prompt templates.
//!
//! Every LLM-backed stage talks to a [`Judge`]: it sends a filled template
//! and gets raw text back, parsed as JSON when possible. Four backends ship
//! with the crate:
//!
//! * [`MockJudge`]: answers derived from a 64-bit hash of the request, for
//!   hermetic tests and smoke runs.
//! * [`ScriptedJudge`]: replays a recorded transcript keyed by request
//!   fingerprint.
//! * [`RuleProxyJudge`]: answers with the rule-based detector/extractor and
//!   mechanical grounding checks.
//! * [`HttpJudge`]: a chat-completion endpoint with retry and backoff.

mod http;
mod mock;
mod rule_proxy;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trajectory::Step;

pub use http::{HttpJudge, HttpJudgeConfig};
pub use mock::MockJudge;
pub use rule_proxy::RuleProxyJudge;
pub use scripted::{ScriptedJudge, TranscriptEntry, TranscriptRecorder};

pub const DEFAULT_MAX_RESPONSE_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("no transcript entry for {template} request (fingerprint {fingerprint})")]
    TranscriptMiss {
        template: TemplateId,
        fingerprint: String,
    },
    #[error("API key variable {0} is not set")]
    AuthMissing(String),
    #[error("{template} response violates schema: {detail}")]
    SchemaViolation { template: TemplateId, detail: String },
    #[error("response of {size} bytes exceeds the {limit}-byte limit")]
    ResponseTooLarge { size: usize, limit: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("placeholder {{{0}}} has no binding")]
    Unbound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Stage1,
    Stage2,
    Stage3,
    SecondJudge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Stage1,
        TemplateId::Stage2,
        TemplateId::Stage3,
        TemplateId::SecondJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Stage1 => "stage1",
            TemplateId::Stage2 => "stage2",
            TemplateId::Stage3 => "stage3",
            TemplateId::SecondJudge => "second_judge",
        }
    }

    /// Raw template text with `{placeholder}` slots.
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::Stage1 => include_str!("../../templates/stage1_failure_detection.v1.txt"),
            TemplateId::Stage2 => include_str!("../../templates/stage2_outcome_extraction.v1.txt"),
            TemplateId::Stage3 => include_str!("../../templates/stage3_prompt_relabeling.v1.txt"),
            TemplateId::SecondJudge => {
                include_str!("../../templates/second_judge_verification.v1.txt")
            }
        }
    }

    pub fn version(self) -> u32 {
        1
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = TemplateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TemplateError::Unknown(s.to_string()))
    }
}

fn is_placeholder_char(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

/// Substitute every `{name}` slot (lowercase letters and underscores only) in
/// a single left-to-right pass. Bound values are inserted verbatim and never
/// rescanned. Braces that do not enclose a plain name are copied as-is, so the
/// JSON schema hints in the templates survive untouched.
pub fn render_text(template: &str, bindings: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !is_placeholder_char(c))
            .unwrap_or(after.len());
        let is_slot = name_len > 0 && after[name_len..].starts_with('}');
        if is_slot {
            let name = &after[..name_len];
            let value = bindings
                .get(name)
                .ok_or_else(|| TemplateError::Unbound(name.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_template(
    template: TemplateId,
    bindings: &BTreeMap<&str, &str>,
) -> Result<String, TemplateError> {
    render_text(template.text(), bindings)
}

/// Look a template up by its string id, then render it.
pub fn render_named(template: &str, bindings: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
    render_template(template.parse()?, bindings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub template_id: TemplateId,
    pub filled_prompt: String,
    pub temperature: f64,
    pub max_response_bytes: usize,
}

impl JudgeRequest {
    pub fn new(template_id: TemplateId, filled_prompt: String, temperature: f64) -> Self {
        JudgeRequest {
            template_id,
            filled_prompt,
            temperature: temperature.clamp(0.0, 2.0),
            max_response_bytes: DEFAULT_MAX_RESPONSE_BYTES,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.template_id, &self.filled_prompt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeResponse {
    pub raw_text: String,
    /// Present iff `raw_text` is valid JSON once code fences are stripped.
    pub parsed_json: Option<Value>,
    pub latency: Duration,
    /// Transport attempts used to obtain this response.
    pub attempt: u32,
}

impl JudgeResponse {
    pub fn new(raw_text: String, latency: Duration, attempt: u32) -> Self {
        let parsed_json = serde_json::from_str(strip_code_fences(&raw_text)).ok();
        JudgeResponse {
            raw_text,
            parsed_json,
            latency,
            attempt,
        }
    }
}

pub trait Judge: Send + Sync {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        (**self).call(req)
    }
}

impl<J: Judge + ?Sized> Judge for Box<J> {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        (**self).call(req)
    }
}

impl<J: Judge + ?Sized> Judge for std::sync::Arc<J> {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        (**self).call(req)
    }
}

/// Remove a surrounding Markdown code fence (```` ``` ```` or ```` ```json ````).
pub fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(body) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let body = match body.find('\n') {
        Some(nl) if body[..nl].chars().all(|c| c.is_ascii_alphanumeric()) => &body[nl + 1..],
        _ => body,
    };
    body.strip_suffix("```").unwrap_or(body).trim()
}

/// Call the judge and return its JSON object, re-asking once when the
/// first reply does not parse.
pub fn call_json(
    judge: &dyn Judge,
    req: &JudgeRequest,
) -> Result<(Map<String, Value>, JudgeResponse), JudgeError> {
    for round in 0..2 {
        let resp = judge.call(req)?;
        if resp.raw_text.len() > req.max_response_bytes {
            return Err(JudgeError::ResponseTooLarge {
                size: resp.raw_text.len(),
                limit: req.max_response_bytes,
            });
        }
        if let Some(Value::Object(map)) = resp.parsed_json.clone() {
            return Ok((map, resp));
        }
        if round == 0 {
            tracing::warn!(template = %req.template_id, "judge reply is not a JSON object, re-asking");
        }
    }
    Err(JudgeError::SchemaViolation {
        template: req.template_id,
        detail: "response is not a JSON object after one re-ask".into(),
    })
}

fn missing(template: TemplateId, field: &str) -> JudgeError {
    JudgeError::SchemaViolation {
        template,
        detail: format!("missing or mistyped field `{field}`"),
    }
}

pub(crate) fn field_f64(
    map: &Map<String, Value>,
    field: &str,
    template: TemplateId,
) -> Result<f64, JudgeError> {
    let v = map.get(field).ok_or_else(|| missing(template, field))?;
    let x = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    };
    x.filter(|x: &f64| x.is_finite())
        .ok_or_else(|| missing(template, field))
}

pub(crate) fn field_bool(
    map: &Map<String, Value>,
    field: &str,
    template: TemplateId,
) -> Result<bool, JudgeError> {
    match map.get(field) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(Value::Number(n)) if n.as_f64() == Some(0.0) => Ok(false),
        Some(Value::Number(n)) if n.as_f64() == Some(1.0) => Ok(true),
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(missing(template, field)),
        },
        _ => Err(missing(template, field)),
    }
}

pub(crate) fn field_str(
    map: &Map<String, Value>,
    field: &str,
    template: TemplateId,
) -> Result<String, JudgeError> {
    match map.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        _ => Err(missing(template, field)),
    }
}

pub(crate) fn field_opt_str(map: &Map<String, Value>, field: &str) -> Option<String> {
    match map.get(field) {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        _ => None,
    }
}

pub(crate) fn field_str_list(
    map: &Map<String, Value>,
    field: &str,
    template: TemplateId,
) -> Result<Vec<String>, JudgeError> {
    match map.get(field) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(missing(template, field)),
            })
            .collect(),
        _ => Err(missing(template, field)),
    }
}

/// Clamp into [0, 1], logging when the judge strayed outside.
pub(crate) fn clamp_unit(value: f64, field: &str, template: TemplateId) -> f64 {
    if (0.0..=1.0).contains(&value) {
        value
    } else {
        tracing::warn!(%template, field, value, "judge value outside [0, 1], clamping");
        value.clamp(0.0, 1.0)
    }
}

pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Transcript key for a request: template id and prompt text only.
pub fn fingerprint(template: TemplateId, filled_prompt: &str) -> String {
    format!(
        "{:016x}",
        stable_hash(&[template.as_str().as_bytes(), filled_prompt.as_bytes()])
    )
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Map 64 random bits onto [0, 1).
pub(crate) fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Text shown to judges for one step's agent turn.
pub fn step_agent_text(step: &Step) -> String {
    format!("Thought: {}\nAction: {}", step.thought, step.action)
}

pub fn step_observation_text(step: &Step) -> String {
    if step.observation.is_empty() {
        "Observation: (no output)".to_string()
    } else {
        format!("Observation: {}", step.observation)
    }
}

/// Text after `label` in the USER part of a rendered prompt, up to `next`
/// (or the end). Used by the offline backends to read their inputs back.
pub(crate) fn prompt_field<'a>(prompt: &'a str, label: &str, next: Option<&str>) -> Option<&'a str> {
    let user = prompt.find("\n\nUSER: ").map(|i| i + 2).unwrap_or(0);
    let tail = &prompt[user..];
    let body = &tail[tail.find(label)? + label.len()..];
    let end = next.and_then(|n| body.find(n)).unwrap_or(body.len());
    Some(body[..end].trim_end_matches('\n'))
}

/// Observations out of a trajectory rendered by [`crate::augment::render_trajectory`].
pub(crate) fn parse_rendered_steps(text: &str) -> Vec<Step> {
    let mut steps = Vec::new();
    for block in text.split("\n\nThought: ") {
        let block = block.strip_prefix("Thought: ").unwrap_or(block);
        if block.starts_with("Final answer: ") {
            continue;
        }
        let Some((thought, rest)) = block.split_once("\nAction: ") else {
            continue;
        };
        let (action, observation) = match rest.split_once("\n\nObservation: ") {
            Some((a, o)) => {
                let o = o.split("\n\nFinal answer: ").next().unwrap_or(o);
                (a, if o == "(no output)" { "" } else { o })
            }
            None => (rest, ""),
        };
        let mut step = Step::new(thought, action, observation);
        step.terminal = observation.is_empty();
        step.index = steps.len() + 1;
        steps.push(step);
    }
    steps
}
