use std::collections::HashSet;
use std::time::Instant;

use serde_json::json;

use super::{parse_rendered_steps, prompt_field, Judge, JudgeError, JudgeRequest, JudgeResponse, TemplateId};
use crate::detector::{detect_rule, Lexicon};
use crate::outcome::{canonical_number, extract_rule, numeric_tokens};
use crate::trajectory::Trajectory;

/// Offline judge that answers every template with the rule-based logic.
///
/// Stage 1 and 2 reproduce the rule modes; Stage 3 turns the first numeric
/// observation into a lookup request; the second judge checks that every
/// number in the proposed prompt occurs in some observation.
#[derive(Debug, Clone, Default)]
pub struct RuleProxyJudge {
    lexicon: Lexicon,
}

const GROUNDED_CONFIDENCE: f64 = 0.9;
const UNGROUNDED_CONFIDENCE: f64 = 0.1;

impl RuleProxyJudge {
    pub fn new(lexicon: Lexicon) -> Self {
        RuleProxyJudge { lexicon }
    }

    fn trajectory(prompt: &str) -> Trajectory {
        let steps = prompt_field(prompt, "Trajectory: ", None)
            .map(parse_rendered_steps)
            .unwrap_or_default();
        let goal = prompt_field(prompt, "Original prompt: ", Some("\nTrajectory: ")).unwrap_or("");
        Trajectory::new("proxy", goal, steps)
    }

    fn reply(&self, req: &JudgeRequest) -> serde_json::Value {
        let prompt = req.filled_prompt.as_str();
        match req.template_id {
            TemplateId::Stage1 => {
                let a = detect_rule(&Self::trajectory(prompt), &self.lexicon);
                json!({
                    "failure_type": a.failure_type.as_str(),
                    "severity_score": a.severity_score,
                    "recoverability": a.recoverable,
                    "severity_weight": a.severity_weight,
                    "explanation": a.explanation,
                })
            }
            TemplateId::Stage2 => {
                let o = extract_rule(&Self::trajectory(prompt), &self.lexicon);
                json!({"actual_achievements": o.achievements, "key_observations": o.key_observations})
            }
            TemplateId::Stage3 => {
                let summary = prompt_field(
                    prompt,
                    "Outcome summary: ",
                    Some("\nOriginal prompt (style reference only): "),
                )
                .and_then(|s| serde_json::from_str::<serde_json::Value>(s).ok())
                .unwrap_or_default();
                let list = |key: &str| -> Vec<String> {
                    summary
                        .get(key)
                        .and_then(|v| v.as_array())
                        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
                        .unwrap_or_default()
                };
                let key = list("key_observations");
                let achievements = list("actual_achievements");
                match key.first().or(achievements.first()) {
                    Some(fact) => {
                        let fact = fact.trim_end_matches('.');
                        json!({
                            "hindsight_prompt": format!("Find and report the following: {fact}."),
                            "is_valid": true,
                            "rationale": "restates an observed fact",
                            "confidence": if key.is_empty() { 0.45 } else { 0.6 },
                        })
                    }
                    None => json!({
                        "hindsight_prompt": "",
                        "is_valid": false,
                        "rationale": "no achievements",
                        "confidence": 0.0,
                    }),
                }
            }
            TemplateId::SecondJudge => {
                let proposed =
                    prompt_field(prompt, "Proposed hindsight prompt: ", Some("\nTrajectory: ")).unwrap_or("");
                let observed: HashSet<String> = Self::trajectory(prompt)
                    .steps
                    .iter()
                    .flat_map(|s| numeric_tokens(&s.observation))
                    .map(|t| canonical_number(&t))
                    .collect();
                let missing: Vec<String> = numeric_tokens(proposed)
                    .into_iter()
                    .filter(|t| !observed.contains(&canonical_number(t)))
                    .collect();
                if missing.is_empty() {
                    json!({"is_valid": true, "confidence": GROUNDED_CONFIDENCE, "rejection_reason_if_any": ""})
                } else {
                    json!({
                        "is_valid": false,
                        "confidence": UNGROUNDED_CONFIDENCE,
                        "rejection_reason_if_any": format!("numbers not in observations: {}", missing.join(", ")),
                    })
                }
            }
        }
    }
}

impl Judge for RuleProxyJudge {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let started = Instant::now();
        let raw = self.reply(req).to_string();
        Ok(JudgeResponse::new(raw, started.elapsed(), 1))
    }
}
