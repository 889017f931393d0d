#![allow(dead_code)]

use hindsight::judge::TranscriptEntry;
use hindsight::outcome::ReplayOutcome;
use hindsight::relabel::{relabel_prompt, second_judge_prompt};
use hindsight::{Step, TemplateId, Trajectory};
use serde_json::json;

pub const COPPER_GOAL: &str = "Find copper wire suppliers with prices under $5/kg and MOQ below 100 kg.";
pub const COPPER_HINDSIGHT: &str = "Compare copper wire suppliers by price per kg and MOQ. Identify the option with the lowest MOQ and report its price.";

pub fn copper_trajectory() -> Trajectory {
    Trajectory::new(
        "wa-001",
        COPPER_GOAL,
        vec![
            Step::new(
                "Search for copper wire bulk pricing.",
                "web_search(\"copper wire bulk pricing\")",
                "5 suppliers found: MetalWorks $6.20/kg (MOQ 50 kg), WireWorld $5.80/kg (MOQ 200 kg), CopperDirect $4.90/kg (MOQ 500 kg), MicroMetals $5.30/kg (MOQ 10 kg).",
            ),
            Step::new(
                "CopperDirect is the cheapest; check whether it takes small orders.",
                "web_search(\"CopperDirect small order\")",
                "CopperDirect: min. 500 kg.",
            ),
            Step::new(
                "No option meets both limits; report the best one.",
                "summarize",
                "Best: MicroMetals $5.30/kg, MOQ 10 kg.",
            ),
        ],
    )
}

pub fn relabel_reply(prompt: &str, valid: bool, confidence: f64) -> String {
    json!({
        "hindsight_prompt": prompt,
        "is_valid": valid,
        "rationale": "scripted",
        "confidence": confidence,
    })
    .to_string()
}

pub fn second_reply(valid: bool, confidence: f64, reason: &str) -> String {
    json!({"is_valid": valid, "confidence": confidence, "rejection_reason_if_any": reason}).to_string()
}

/// Stage-3 entries replayed in order for one (outcome, goal) pair.
pub fn stage3_entries(outcome: &ReplayOutcome, goal: &str, replies: &[(&str, bool, f64)]) -> Vec<TranscriptEntry> {
    let prompt = relabel_prompt(outcome, goal).unwrap();
    replies
        .iter()
        .map(|&(g, v, c)| TranscriptEntry::for_prompt(TemplateId::Stage3, &prompt, relabel_reply(g, v, c)))
        .collect()
}

pub fn second_entries(hindsight: &str, traj: &Trajectory, replies: &[(bool, f64, &str)]) -> Vec<TranscriptEntry> {
    let prompt = second_judge_prompt(hindsight, traj).unwrap();
    replies
        .iter()
        .map(|&(v, c, r)| TranscriptEntry::for_prompt(TemplateId::SecondJudge, &prompt, second_reply(v, c, r)))
        .collect()
}
