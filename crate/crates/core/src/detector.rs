//! Stage 1: failure classification, severity scoring and the severity gate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::render_trajectory;
use crate::judge::{
    call_json, clamp_unit, field_bool, field_f64, field_opt_str, field_str, render_template,
    Judge, JudgeError, JudgeRequest, TemplateId,
};
use crate::trajectory::Trajectory;

/// Weight ceiling for major failure types in rule mode. Sits just under the
/// default δ = 0.3 so those runs are discarded unless δ is lowered.
pub const MAJOR_WEIGHT_CAP: f64 = 0.29;

/// Observations shorter than this (after trimming) carry no usable content.
pub const MIN_SUBSTANTIVE_CHARS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureType {
    Incomplete,
    ConstraintViolation,
    WrongResult,
    ToolError,
    Hallucination,
    OffTopic,
}

impl FailureType {
    pub const ALL: [FailureType; 6] = [
        FailureType::Incomplete,
        FailureType::ConstraintViolation,
        FailureType::WrongResult,
        FailureType::ToolError,
        FailureType::Hallucination,
        FailureType::OffTopic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureType::Incomplete => "incomplete",
            FailureType::ConstraintViolation => "constraint_violation",
            FailureType::WrongResult => "wrong_result",
            FailureType::ToolError => "tool_error",
            FailureType::Hallucination => "hallucination",
            FailureType::OffTopic => "off_topic",
        }
    }

    /// Hallucinated observations and tool misuse are the major categories.
    pub fn is_major(self) -> bool {
        matches!(self, FailureType::Hallucination | FailureType::ToolError)
    }
}

impl fmt::Display for FailureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FailureType {
    type Err = LexiconError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        FailureType::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| LexiconError::UnknownType(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("unknown failure type {0:?}")]
    UnknownType(String),
    #[error("failure type {0} has no terms")]
    NoTerms(FailureType),
    #[error("priority must list all six failure types exactly once")]
    BadPriority,
    #[error("lexicon file: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Deserialize, Serialize)]
struct LexiconFile {
    types: BTreeMap<String, Vec<String>>,
    error_patterns: Vec<String>,
    priority: Vec<String>,
}

/// Keyword lexicon driving rule-mode detection and observation filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    terms: BTreeMap<FailureType, Vec<String>>,
    error_patterns: Vec<String>,
    priority: Vec<FailureType>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::from_json(include_str!("../assets/default_lexicon.json"))
            .expect("shipped lexicon is valid")
    }
}

impl Lexicon {
    pub fn new(
        terms: BTreeMap<FailureType, Vec<String>>,
        error_patterns: Vec<String>,
        priority: Vec<FailureType>,
    ) -> Result<Self, LexiconError> {
        let lower = |v: Vec<String>| -> Vec<String> {
            v.into_iter()
                .map(|t| t.trim().to_lowercase())
                .filter(|t| !t.is_empty())
                .collect()
        };
        let terms: BTreeMap<_, _> = terms.into_iter().map(|(k, v)| (k, lower(v))).collect();
        for t in FailureType::ALL {
            if terms.get(&t).is_none_or(|v| v.is_empty()) {
                return Err(LexiconError::NoTerms(t));
            }
        }
        let distinct: BTreeSet<_> = priority.iter().collect();
        if priority.len() != FailureType::ALL.len() || distinct.len() != priority.len() {
            return Err(LexiconError::BadPriority);
        }
        Ok(Lexicon {
            terms,
            error_patterns: lower(error_patterns),
            priority,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = serde_json::from_str(text)?;
        let mut terms = BTreeMap::new();
        for (name, list) in file.types {
            terms.insert(name.parse::<FailureType>()?, list);
        }
        let priority = file
            .priority
            .iter()
            .map(|p| p.parse())
            .collect::<Result<Vec<_>, _>>()?;
        Lexicon::new(terms, file.error_patterns, priority)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        Lexicon::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = LexiconFile {
            types: self
                .terms
                .iter()
                .map(|(k, v)| (k.as_str().to_string(), v.clone()))
                .collect(),
            error_patterns: self.error_patterns.clone(),
            priority: self.priority.iter().map(|p| p.as_str().to_string()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("lexicon serializes")
    }

    pub fn terms(&self, kind: FailureType) -> &[String] {
        &self.terms[&kind]
    }

    pub fn priority(&self) -> &[FailureType] {
        &self.priority
    }

    pub fn error_patterns(&self) -> &[String] {
        &self.error_patterns
    }

    pub fn is_error_observation(&self, observation: &str) -> bool {
        let lower = observation.to_lowercase();
        self.error_patterns.iter().any(|p| lower.contains(p.as_str()))
    }

    /// At least [`MIN_SUBSTANTIVE_CHARS`] characters and no error pattern.
    pub fn is_substantive(&self, observation: &str) -> bool {
        observation.trim().chars().count() >= MIN_SUBSTANTIVE_CHARS
            && !self.is_error_observation(observation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureAssessment {
    pub failure_type: FailureType,
    /// v
    pub severity_score: f64,
    /// r
    pub recoverable: bool,
    /// w
    pub severity_weight: f64,
    /// h; always 0 for judge verdicts.
    pub matched_terms: u32,
    pub explanation: String,
}

/// Rule-mode severity: `min(1, 0.3 + 0.1·h)`.
pub fn rule_severity(matched_terms: u32) -> f64 {
    (0.3 + 0.1 * f64::from(matched_terms)).min(1.0)
}

pub fn detect_rule(traj: &Trajectory, lex: &Lexicon) -> FailureAssessment {
    let text: String = traj
        .steps
        .iter()
        .map(|s| format!("{}\n{}\n{}", s.thought, s.action, s.observation).to_lowercase())
        .collect::<Vec<_>>()
        .join("\n");

    let mut hits: BTreeMap<FailureType, Vec<&str>> = BTreeMap::new();
    let mut distinct: BTreeSet<&str> = BTreeSet::new();
    for kind in FailureType::ALL {
        for term in lex.terms(kind) {
            if text.contains(term.as_str()) {
                hits.entry(kind).or_default().push(term);
                distinct.insert(term);
            }
        }
    }
    let failure_type = lex
        .priority()
        .iter()
        .copied()
        .find(|k| hits.contains_key(k))
        .unwrap_or(FailureType::Incomplete);

    let matched_terms = distinct.len() as u32;
    let severity_score = rule_severity(matched_terms);
    let usable = traj
        .steps
        .iter()
        .filter(|s| lex.is_substantive(&s.observation))
        .count();
    let recoverable = usable > 0;
    let mut severity_weight = 1.0 - severity_score;
    if failure_type.is_major() {
        severity_weight = severity_weight.min(MAJOR_WEIGHT_CAP);
    }

    let explanation = format!(
        "{failure_type}: {matched_terms} matched term(s) [{}]; {usable}/{} observations usable",
        distinct.iter().copied().collect::<Vec<_>>().join(", "),
        traj.steps.len()
    );
    FailureAssessment {
        failure_type,
        severity_score,
        recoverable,
        severity_weight: severity_weight.clamp(0.0, 1.0),
        matched_terms,
        explanation,
    }
}

/// Filled Stage-1 prompt for a trajectory.
pub fn detection_prompt(traj: &Trajectory) -> Result<String, JudgeError> {
    let rendered = render_trajectory(traj);
    let bindings = BTreeMap::from([
        ("original_prompt", traj.goal.as_str()),
        ("trajectory", rendered.as_str()),
    ]);
    Ok(render_template(TemplateId::Stage1, &bindings)?)
}

/// Judge-mode Stage 1. Out-of-range numbers are clamped into [0, 1].
pub fn detect_judge(
    traj: &Trajectory,
    judge: &dyn Judge,
    temperature: f64,
) -> Result<FailureAssessment, JudgeError> {
    let req = JudgeRequest::new(TemplateId::Stage1, detection_prompt(traj)?, temperature);
    let (obj, _) = call_json(judge, &req)?;
    let t = TemplateId::Stage1;

    let kind = field_str(&obj, "failure_type", t)?;
    let failure_type = kind.parse().map_err(|_| JudgeError::SchemaViolation {
        template: t,
        detail: format!("unknown failure_type {kind:?}"),
    })?;
    Ok(FailureAssessment {
        failure_type,
        severity_score: clamp_unit(field_f64(&obj, "severity_score", t)?, "severity_score", t),
        recoverable: field_bool(&obj, "recoverability", t)?,
        severity_weight: clamp_unit(field_f64(&obj, "severity_weight", t)?, "severity_weight", t),
        matched_terms: 0,
        explanation: field_opt_str(&obj, "explanation").unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVerdict {
    Pass,
    Discard,
}

/// Discard irrecoverable runs and runs whose weight falls below `delta`.
pub fn severity_gate(a: &FailureAssessment, delta: f64) -> GateVerdict {
    gate(a.recoverable, a.severity_weight, delta)
}

pub(crate) fn gate(recoverable: bool, weight: f64, delta: f64) -> GateVerdict {
    if !recoverable || weight < delta {
        GateVerdict::Discard
    } else {
        GateVerdict::Pass
    }
}
