//! Stage 3: hindsight goal synthesis, verification and the retry loop.
//!
//! Each attempt asks the relabeler for `(ĝ, valid, rationale, confidence)`.
//! Two of the four relabeling constraints are checked locally: every number
//! in ĝ must appear in the outcome, and ĝ must not contain the original goal.
//! The other two (natural phrasing, matching complexity) are left to the judge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::render_trajectory;
use crate::judge::{
    call_json, clamp_unit, field_bool, field_f64, field_opt_str, field_str, render_template,
    Judge, JudgeError, JudgeRequest, TemplateId,
};
use crate::outcome::{numeric_tokens, ReplayOutcome};
use crate::trajectory::{PipelineConfig, Trajectory};

/// Fallback acceptance requires `c ≥ FALLBACK_FRACTION · θ`.
pub const FALLBACK_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOpinion {
    /// c₂
    pub confidence: f64,
    pub is_valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<String>,
}

impl SecondOpinion {
    pub fn confirms(&self, theta: f64) -> bool {
        self.is_valid && self.confidence >= theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelAttempt {
    pub hindsight_prompt: String,
    pub is_valid: bool,
    pub rationale: String,
    /// c, first-judge confidence.
    pub confidence: f64,
    pub attempt_index: u32,
    pub temperature_used: f64,
    /// Why a local guard overrode the judge's `is_valid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<SecondOpinion>,
    /// Judge failure that voided this attempt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Second-judge failure; the attempt still competes for fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_error: Option<String>,
}

impl RelabelAttempt {
    fn failed(attempt_index: u32, temperature_used: f64, err: &JudgeError) -> Self {
        RelabelAttempt {
            hindsight_prompt: String::new(),
            is_valid: false,
            rationale: String::new(),
            confidence: 0.0,
            attempt_index,
            temperature_used,
            guard: None,
            second: None,
            error: Some(err.to_string()),
            second_error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptancePath {
    MultiJudge,
    SingleJudge,
    Fallback,
    Rejected,
}

impl AcceptancePath {
    pub fn as_str(self) -> &'static str {
        match self {
            AcceptancePath::MultiJudge => "multi_judge",
            AcceptancePath::SingleJudge => "single_judge",
            AcceptancePath::Fallback => "fallback",
            AcceptancePath::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelDecision {
    pub accepted: bool,
    pub path: AcceptancePath,
    /// ĝ*; empty when rejected.
    pub hindsight_prompt: String,
    /// c*
    pub confidence: f64,
    /// c₂ of the accepted attempt, when a second judge confirmed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_confidence: Option<f64>,
    /// 1-based index of the attempt that was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_attempt: Option<u32>,
    /// Set when the fallback winner had been turned down by the second judge.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback_after_second_rejection: bool,
    pub attempts: Vec<RelabelAttempt>,
}

impl RelabelDecision {
    pub fn rejected(attempts: Vec<RelabelAttempt>) -> Self {
        RelabelDecision {
            accepted: false,
            path: AcceptancePath::Rejected,
            hindsight_prompt: String::new(),
            confidence: 0.0,
            second_confidence: None,
            chosen_attempt: None,
            fallback_after_second_rejection: false,
            attempts,
        }
    }

    pub fn primary_calls(&self) -> usize {
        self.attempts.len()
    }

    pub fn second_calls(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| a.second.is_some() || a.second_error.is_some())
            .count()
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    let needle = needle.trim().to_lowercase();
    !needle.is_empty() && haystack.to_lowercase().contains(&needle)
}

/// Filled Stage-3 prompt for an outcome and the original goal.
pub fn relabel_prompt(outcome: &ReplayOutcome, original_goal: &str) -> Result<String, JudgeError> {
    let summary = outcome.to_prompt_json();
    Ok(render_template(
        TemplateId::Stage3,
        &BTreeMap::from([("outcome", summary.as_str()), ("original_prompt", original_goal)]),
    )?)
}

/// Filled second-judge prompt.
pub fn second_judge_prompt(hindsight_prompt: &str, traj: &Trajectory) -> Result<String, JudgeError> {
    let rendered = render_trajectory(traj);
    Ok(render_template(
        TemplateId::SecondJudge,
        &BTreeMap::from([
            ("hindsight_prompt", hindsight_prompt),
            ("trajectory", rendered.as_str()),
        ]),
    )?)
}

/// One relabeling call with the local grounding and no-reuse guards applied.
pub fn relabel_once(
    outcome: &ReplayOutcome,
    original_goal: &str,
    temperature: f64,
    judge: &dyn Judge,
) -> Result<RelabelAttempt, JudgeError> {
    let req = JudgeRequest::new(TemplateId::Stage3, relabel_prompt(outcome, original_goal)?, temperature);
    let (obj, _) = call_json(judge, &req)?;
    let t = TemplateId::Stage3;

    let hindsight_prompt = field_str(&obj, "hindsight_prompt", t)?.trim().to_string();
    let mut is_valid = field_bool(&obj, "is_valid", t)?;
    let confidence = clamp_unit(field_f64(&obj, "confidence", t)?, "confidence", t);
    let rationale = field_opt_str(&obj, "rationale").unwrap_or_default();
    if is_valid && hindsight_prompt.is_empty() {
        return Err(JudgeError::SchemaViolation {
            template: t,
            detail: "empty hindsight_prompt marked valid".into(),
        });
    }

    let mut guard = None;
    if is_valid {
        if let Some(tok) = numeric_tokens(&hindsight_prompt)
            .into_iter()
            .find(|tok| !outcome.has_number(tok))
        {
            guard = Some(format!("number {tok} does not occur in the outcome"));
        } else if contains_ci(&hindsight_prompt, original_goal) {
            guard = Some("hindsight prompt reuses the original prompt".to_string());
        }
        if let Some(reason) = &guard {
            tracing::info!(%reason, "relabel attempt invalidated by local guard");
            is_valid = false;
        }
    }
    Ok(RelabelAttempt {
        hindsight_prompt,
        is_valid,
        rationale,
        confidence,
        attempt_index: 1,
        temperature_used: req.temperature,
        guard,
        second: None,
        error: None,
        second_error: None,
    })
}

/// Second, independent verification call at temperature 0.
pub fn verify_second(
    hindsight_prompt: &str,
    traj: &Trajectory,
    judge: &dyn Judge,
) -> Result<SecondOpinion, JudgeError> {
    verify_second_at(hindsight_prompt, traj, judge, 0.0)
}

pub fn verify_second_at(
    hindsight_prompt: &str,
    traj: &Trajectory,
    judge: &dyn Judge,
    temperature: f64,
) -> Result<SecondOpinion, JudgeError> {
    let req = JudgeRequest::new(
        TemplateId::SecondJudge,
        second_judge_prompt(hindsight_prompt, traj)?,
        temperature,
    );
    let (obj, _) = call_json(judge, &req)?;
    let t = TemplateId::SecondJudge;
    let confidence = clamp_unit(field_f64(&obj, "confidence", t)?, "confidence", t);
    let is_valid = match obj.get("is_valid") {
        None => true,
        Some(_) => field_bool(&obj, "is_valid", t)?,
    };
    Ok(SecondOpinion {
        confidence,
        is_valid,
        rejection_reason: field_opt_str(&obj, "rejection_reason_if_any")
            .or_else(|| field_opt_str(&obj, "rejection_reason")),
    })
}

/// The retry loop for one trajectory.
///
/// Attempts run at the first-attempt temperature, then at the retry
/// temperature. With `multi_judge`, an attempt that is valid with `c ≥ θ` is
/// sent to the second judge and accepted when it confirms with `c₂ ≥ θ`
/// (`c* = (c + c₂)/2`); otherwise it is accepted on the first judge alone.
/// Every valid attempt also competes for the fallback slot, including ones
/// the second judge turned down; the best of them is kept if `c ≥ 0.8·θ`.
pub fn relabel_loop(
    outcome: &ReplayOutcome,
    original_goal: &str,
    traj: &Trajectory,
    cfg: &PipelineConfig,
    judge: &dyn Judge,
) -> RelabelDecision {
    let theta = cfg.theta;
    let mut attempts: Vec<RelabelAttempt> = Vec::with_capacity(cfg.max_retries as usize);
    // (position in `attempts`, confidence)
    let mut best: Option<(usize, f64)> = None;

    for k in 1..=cfg.max_retries {
        let temperature = if k == 1 {
            cfg.temperatures.first_attempt
        } else {
            cfg.temperatures.retry
        };
        let mut attempt = match relabel_once(outcome, original_goal, temperature, judge) {
            Ok(a) => a,
            Err(e) => {
                tracing::warn!(trajectory = %traj.id, attempt = k, error = %e, "relabel attempt failed");
                attempts.push(RelabelAttempt::failed(k, temperature, &e));
                continue;
            }
        };
        attempt.attempt_index = k;

        if attempt.is_valid && attempt.confidence >= theta {
            if !cfg.multi_judge {
                let decision = RelabelDecision {
                    accepted: true,
                    path: AcceptancePath::SingleJudge,
                    hindsight_prompt: attempt.hindsight_prompt.clone(),
                    confidence: attempt.confidence,
                    second_confidence: None,
                    chosen_attempt: Some(k),
                    fallback_after_second_rejection: false,
                    attempts: vec![],
                };
                attempts.push(attempt);
                return RelabelDecision { attempts, ..decision };
            }
            match verify_second_at(
                &attempt.hindsight_prompt,
                traj,
                judge,
                cfg.temperatures.second_judge,
            ) {
                Ok(second) => {
                    let confirmed = second.confirms(theta);
                    let c2 = second.confidence;
                    attempt.second = Some(second);
                    if confirmed {
                        let decision = RelabelDecision {
                            accepted: true,
                            path: AcceptancePath::MultiJudge,
                            hindsight_prompt: attempt.hindsight_prompt.clone(),
                            confidence: (attempt.confidence + c2) / 2.0,
                            second_confidence: Some(c2),
                            chosen_attempt: Some(k),
                            fallback_after_second_rejection: false,
                            attempts: vec![],
                        };
                        attempts.push(attempt);
                        return RelabelDecision { attempts, ..decision };
                    }
                }
                Err(e) => {
                    tracing::warn!(trajectory = %traj.id, attempt = k, error = %e, "second judge failed");
                    attempt.second_error = Some(e.to_string());
                }
            }
        }

        if attempt.is_valid && best.is_none_or(|(_, c)| attempt.confidence > c) {
            best = Some((attempts.len(), attempt.confidence));
        }
        attempts.push(attempt);
    }

    match best {
        Some((pos, c)) if c >= FALLBACK_FRACTION * theta => {
            let chosen = &attempts[pos];
            tracing::debug!(trajectory = %traj.id, attempt = chosen.attempt_index, "fallback acceptance");
            RelabelDecision {
                accepted: true,
                path: AcceptancePath::Fallback,
                hindsight_prompt: chosen.hindsight_prompt.clone(),
                confidence: c,
                second_confidence: None,
                chosen_attempt: Some(chosen.attempt_index),
                fallback_after_second_rejection: chosen.second.is_some(),
                attempts,
            }
        }
        _ => RelabelDecision::rejected(attempts),
    }
}
