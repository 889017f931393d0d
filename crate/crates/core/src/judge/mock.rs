use std::time::Instant;

use serde_json::json;

use super::{
    parse_rendered_steps, prompt_field, splitmix64, stable_hash, unit_from_bits, Judge,
    JudgeError, JudgeRequest, JudgeResponse, TemplateId,
};
use crate::detector::FailureType;
use crate::outcome::truncate_chars;

/// Deterministic stand-in judge.
///
/// Every numeric field is drawn from a 64-bit hash of
/// `(template_id, filled_prompt, seed)`, so identical requests always get
/// identical replies and confidences spread evenly over [0, 1). Outcome
/// extraction and relabeling echo the observations found in the prompt so
/// that downstream grounding checks have something real to work with.
#[derive(Debug, Clone, Default)]
pub struct MockJudge {
    seed: u64,
}

impl MockJudge {
    pub fn new(seed: u64) -> Self {
        MockJudge { seed }
    }

    fn base_hash(&self, req: &JudgeRequest) -> u64 {
        stable_hash(&[
            req.template_id.as_str().as_bytes(),
            req.filled_prompt.as_bytes(),
            &self.seed.to_le_bytes(),
        ])
    }

    /// Hash-derived confidence in [0, 1) for a request.
    pub fn confidence(&self, req: &JudgeRequest) -> f64 {
        unit_from_bits(splitmix64(self.base_hash(req)))
    }

    fn reply(&self, req: &JudgeRequest) -> serde_json::Value {
        let base = self.base_hash(req);
        let draw = |k: u64| unit_from_bits(splitmix64(base ^ k.wrapping_mul(0x9E37_79B9)));
        let prompt = req.filled_prompt.as_str();
        match req.template_id {
            TemplateId::Stage1 => {
                let kind = FailureType::ALL[(splitmix64(base ^ 0xF00D) % 6) as usize];
                json!({
                    "failure_type": kind.as_str(),
                    "severity_score": draw(1),
                    "recoverability": draw(2) >= 0.1,
                    "severity_weight": draw(3),
                    "explanation": "mock verdict",
                })
            }
            TemplateId::Stage2 => {
                let steps = prompt_field(prompt, "Trajectory: ", None)
                    .map(parse_rendered_steps)
                    .unwrap_or_default();
                let facts: Vec<String> = steps
                    .iter()
                    .filter(|s| !s.observation.trim().is_empty())
                    .map(|s| truncate_chars(s.observation.trim(), 200).to_string())
                    .collect();
                json!({"actual_achievements": facts, "key_observations": facts})
            }
            TemplateId::Stage3 => {
                let first = prompt_field(
                    prompt,
                    "Outcome summary: ",
                    Some("\nOriginal prompt (style reference only): "),
                )
                .and_then(|s| serde_json::from_str::<serde_json::Value>(s).ok())
                .and_then(|v| {
                    v.get("actual_achievements")?
                        .as_array()?
                        .first()?
                        .as_str()
                        .map(str::to_string)
                });
                match first {
                    Some(fact) => json!({
                        "hindsight_prompt": format!("Look this up and report what you find: {fact}"),
                        "is_valid": draw(2) >= 0.15,
                        "rationale": "mock relabeling",
                        "confidence": draw(1),
                    }),
                    None => json!({
                        "hindsight_prompt": "",
                        "is_valid": false,
                        "rationale": "nothing to relabel",
                        "confidence": 0.0,
                    }),
                }
            }
            TemplateId::SecondJudge => {
                let c = self.confidence(req);
                json!({
                    "is_valid": c >= 0.5,
                    "confidence": c,
                    "rejection_reason_if_any": if c >= 0.5 { "" } else { "mock rejection" },
                })
            }
        }
    }
}

impl Judge for MockJudge {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let started = Instant::now();
        let raw = self.reply(req).to_string();
        Ok(JudgeResponse::new(raw, started.elapsed(), 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_request_same_text() {
        let judge = MockJudge::new(7);
        let req = JudgeRequest::new(TemplateId::SecondJudge, "prompt".into(), 0.0);
        let a = judge.call(&req).unwrap();
        let b = judge.call(&req).unwrap();
        assert_eq!(a.raw_text, b.raw_text);
        assert!(a.parsed_json.is_some());
    }

    #[test]
    fn seed_changes_answers() {
        let req = JudgeRequest::new(TemplateId::SecondJudge, "prompt".into(), 0.0);
        assert_ne!(
            MockJudge::new(1).confidence(&req),
            MockJudge::new(2).confidence(&req)
        );
    }

    #[test]
    fn confidences_are_roughly_uniform() {
        let judge = MockJudge::new(42);
        let n = 10_000;
        let mean = (0..n)
            .map(|i| {
                judge.confidence(&JudgeRequest::new(
                    TemplateId::Stage3,
                    format!("distinct prompt #{i}"),
                    0.3,
                ))
            })
            .sum::<f64>()
            / n as f64;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }
}
