mod common;

use common::*;
use hindsight::detector::Lexicon;
use hindsight::judge::{MockJudge, ScriptedJudge, TranscriptEntry};
use hindsight::outcome::extract_rule;
use hindsight::relabel::{relabel_loop, relabel_once, verify_second, FALLBACK_FRACTION};
use hindsight::{AcceptancePath, PipelineConfig};
use proptest::prelude::*;

fn outcome() -> hindsight::ReplayOutcome {
    extract_rule(&copper_trajectory(), &Lexicon::default())
}

#[test]
fn copper_pair_accepts_through_both_judges() {
    let t = copper_trajectory();
    let o = outcome();
    let mut entries = stage3_entries(&o, &t.goal, &[(COPPER_HINDSIGHT, true, 0.87)]);
    entries.extend(second_entries(COPPER_HINDSIGHT, &t, &[(true, 0.91, "")]));
    let judge = ScriptedJudge::new(entries);

    let first = relabel_once(&o, &t.goal, 0.3, &judge).unwrap();
    assert_eq!(first.confidence, 0.87);
    assert!(first.is_valid);
    assert_eq!(verify_second(COPPER_HINDSIGHT, &t, &judge).unwrap().confidence, 0.91);

    let d = relabel_loop(&o, &t.goal, &t, &PipelineConfig::default(), &judge);
    assert!(d.accepted);
    assert_eq!(d.path, AcceptancePath::MultiJudge);
    assert_eq!(d.confidence, (0.87 + 0.91) / 2.0);
    assert!((d.confidence - 0.89).abs() < 1e-12);
    assert_eq!(d.second_confidence, Some(0.91));
    assert_eq!(d.hindsight_prompt, COPPER_HINDSIGHT);
    assert_eq!(d.primary_calls(), 1);
    assert_eq!(d.second_calls(), 1);
    assert_eq!(d.attempts[0].temperature_used, 0.3);
}

#[test]
fn low_confidence_skips_second_judge_and_falls_back() {
    let t = copper_trajectory();
    let o = outcome();
    // no second-judge entries: a call would miss and show up as second_error
    let judge = ScriptedJudge::new(stage3_entries(&o, &t.goal, &[(COPPER_HINDSIGHT, true, 0.42)]));
    let d = relabel_loop(&o, &t.goal, &t, &PipelineConfig::default(), &judge);
    assert!(d.accepted);
    assert_eq!(d.path, AcceptancePath::Fallback);
    assert_eq!(d.confidence, 0.42);
    assert!(d.confidence >= FALLBACK_FRACTION * 0.5);
    assert_eq!(d.second_calls(), 0);
    assert_eq!(d.primary_calls(), 3);
    let temps: Vec<f64> = d.attempts.iter().map(|a| a.temperature_used).collect();
    assert_eq!(temps, vec![0.3, 0.7, 0.7]);
}

#[test]
fn below_fallback_bar_is_rejected() {
    let t = copper_trajectory();
    let o = outcome();
    let judge = ScriptedJudge::new(stage3_entries(&o, &t.goal, &[(COPPER_HINDSIGHT, true, 0.39)]));
    let d = relabel_loop(&o, &t.goal, &t, &PipelineConfig::default(), &judge);
    assert!(!d.accepted);
    assert_eq!(d.path, AcceptancePath::Rejected);
}

#[test]
fn all_invalid_attempts_reject() {
    let t = copper_trajectory();
    let o = outcome();
    let judge = ScriptedJudge::new(stage3_entries(
        &o,
        &t.goal,
        &[("a", false, 0.9), ("b", false, 0.95), ("c", false, 0.99)],
    ));
    let d = relabel_loop(&o, &t.goal, &t, &PipelineConfig::default(), &judge);
    assert!(!d.accepted);
    assert_eq!(d.path, AcceptancePath::Rejected);
    assert_eq!(d.attempts.len(), 3);
    assert!(d.hindsight_prompt.is_empty());
}

#[test]
fn second_judge_rejection_keeps_reason_and_allows_fallback() {
    let t = copper_trajectory();
    let o = outcome();
    let mut entries = stage3_entries(&o, &t.goal, &[(COPPER_HINDSIGHT, true, 0.8)]);
    entries.extend(second_entries(COPPER_HINDSIGHT, &t, &[(false, 0.1, "MOQ claim not shown")]));
    let judge = ScriptedJudge::new(entries);

    let s = verify_second(COPPER_HINDSIGHT, &t, &judge).unwrap();
    assert_eq!(s.confidence, 0.1);
    assert_eq!(s.rejection_reason.as_deref(), Some("MOQ claim not shown"));

    let d = relabel_loop(&o, &t.goal, &t, &PipelineConfig::default(), &judge);
    assert_eq!(d.second_calls(), 3);
    assert_eq!(d.path, AcceptancePath::Fallback);
    assert!(d.fallback_after_second_rejection);
    assert_eq!(d.confidence, 0.8);
    assert_eq!(d.chosen_attempt, Some(1));
}

#[test]
fn later_attempt_can_pass_both_judges() {
    let t = copper_trajectory();
    let o = outcome();
    let better = "Identify the copper wire supplier with the lowest MOQ and report its price per kg.";
    let mut entries = stage3_entries(&o, &t.goal, &[("Report supplier prices.", false, 0.3), (better, true, 0.7)]);
    entries.extend(second_entries(better, &t, &[(true, 0.6, "")]));
    let d = relabel_loop(&o, &t.goal, &t, &PipelineConfig::default(), &ScriptedJudge::new(entries));
    assert_eq!(d.path, AcceptancePath::MultiJudge);
    assert_eq!(d.chosen_attempt, Some(2));
    assert!((d.confidence - 0.65).abs() < 1e-12);
    assert_eq!(d.attempts[1].temperature_used, 0.7);
}

#[test]
fn single_judge_mode_never_calls_verifier() {
    let t = copper_trajectory();
    let o = outcome();
    let judge = ScriptedJudge::new(stage3_entries(&o, &t.goal, &[(COPPER_HINDSIGHT, true, 0.87)]));
    let cfg = PipelineConfig { multi_judge: false, ..Default::default() };
    let d = relabel_loop(&o, &t.goal, &t, &cfg, &judge);
    assert_eq!(d.path, AcceptancePath::SingleJudge);
    assert_eq!(d.confidence, 0.87);
    assert_eq!(d.second_calls(), 0);
}

#[test]
fn ungrounded_number_is_forced_invalid() {
    let t = copper_trajectory();
    let o = outcome();
    let g = "Find copper wire at $7.77/kg from any supplier.";
    let judge = ScriptedJudge::new(stage3_entries(&o, &t.goal, &[(g, true, 0.95)]));
    let a = relabel_once(&o, &t.goal, 0.3, &judge).unwrap();
    assert!(!a.is_valid);
    assert!(a.guard.unwrap().contains("7.77"));
}

#[test]
fn reusing_the_original_goal_is_forced_invalid() {
    let t = copper_trajectory();
    let o = outcome();
    let g = format!("Please: {}", t.goal.to_uppercase());
    let judge = ScriptedJudge::new(stage3_entries(&o, &t.goal, &[(&g, true, 0.95)]));
    let a = relabel_once(&o, &t.goal, 0.3, &judge).unwrap();
    assert!(!a.is_valid);
}

#[test]
fn empty_valid_prompt_is_a_schema_violation() {
    let t = copper_trajectory();
    let o = outcome();
    let judge = ScriptedJudge::new(stage3_entries(&o, &t.goal, &[("", true, 0.9)]));
    assert!(matches!(
        relabel_once(&o, &t.goal, 0.3, &judge),
        Err(hindsight::JudgeError::SchemaViolation { .. })
    ));
}

#[test]
fn judge_errors_count_as_failed_attempts() {
    let t = copper_trajectory();
    let d = relabel_loop(&outcome(), &t.goal, &t, &PipelineConfig::default(), &ScriptedJudge::new(vec![]));
    assert!(!d.accepted);
    assert_eq!(d.attempts.len(), 3);
    assert!(d.attempts.iter().all(|a| a.error.is_some()));
}

#[test]
fn mock_decisions_are_reproducible() {
    let t = copper_trajectory();
    let o = outcome();
    let cfg = PipelineConfig::default();
    let a = relabel_loop(&o, &t.goal, &t, &cfg, &MockJudge::new(3));
    let b = relabel_loop(&o, &t.goal, &t, &cfg, &MockJudge::new(3));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let j = MockJudge::new(3);
    assert_eq!(
        verify_second(COPPER_HINDSIGHT, &t, &j).unwrap(),
        verify_second(COPPER_HINDSIGHT, &t, &j).unwrap()
    );
}

fn scripted(attempts: &[(bool, f64)], seconds: &[f64]) -> ScriptedJudge {
    let t = copper_trajectory();
    let o = outcome();
    let mut entries: Vec<TranscriptEntry> = Vec::new();
    let prompts: Vec<String> = (0..attempts.len()).map(|i| format!("Report the supplier list, variant {}.", i + 1)).collect();
    let replies: Vec<(&str, bool, f64)> = attempts
        .iter()
        .zip(&prompts)
        .map(|(&(v, c), p)| (p.as_str(), v, c))
        .collect();
    entries.extend(stage3_entries(&o, &t.goal, &replies));
    for (p, &c2) in prompts.iter().zip(seconds) {
        entries.extend(second_entries(p, &t, &[(true, c2, "")]));
    }
    judge_with(entries)
}

fn judge_with(entries: Vec<TranscriptEntry>) -> ScriptedJudge {
    ScriptedJudge::new(entries)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raising_theta_never_adds_acceptances(
        attempts in proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), 3),
        seconds in proptest::collection::vec(0.0f64..=1.0, 3),
        lo in 0.0f64..=1.0,
        bump in 0.0f64..=0.5,
    ) {
        let t = copper_trajectory();
        let o = outcome();
        let hi = (lo + bump).min(1.0);
        let at = |theta: f64| {
            let cfg = PipelineConfig { theta, ..Default::default() };
            relabel_loop(&o, &t.goal, &t, &cfg, &scripted(&attempts, &seconds)).accepted
        };
        prop_assert!(!at(hi) || at(lo));
    }

    #[test]
    fn call_counts_and_average_bounds(
        attempts in proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), 3),
        seconds in proptest::collection::vec(0.0f64..=1.0, 3),
        theta in 0.0f64..=1.0,
    ) {
        let t = copper_trajectory();
        let o = outcome();
        let cfg = PipelineConfig { theta, ..Default::default() };
        let d = relabel_loop(&o, &t.goal, &t, &cfg, &scripted(&attempts, &seconds));
        prop_assert!(d.primary_calls() <= 3);
        prop_assert!(d.second_calls() <= 3);
        match d.path {
            AcceptancePath::MultiJudge => {
                let k = d.chosen_attempt.unwrap() as usize - 1;
                let c = d.attempts[k].confidence;
                let c2 = d.second_confidence.unwrap();
                prop_assert!(c >= theta && c2 >= theta);
                prop_assert!(d.confidence >= c.min(c2) && d.confidence <= c.max(c2));
            }
            AcceptancePath::Fallback => prop_assert!(d.confidence >= FALLBACK_FRACTION * theta),
            AcceptancePath::Rejected => prop_assert!(!d.accepted),
            AcceptancePath::SingleJudge => prop_assert!(false, "single path in multi mode"),
        }
    }

    #[test]
    fn multi_judge_acceptances_are_single_judge_acceptances(
        attempts in proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), 3),
        seconds in proptest::collection::vec(0.0f64..=1.0, 3),
        theta in 0.0f64..=1.0,
    ) {
        let t = copper_trajectory();
        let o = outcome();
        let multi = PipelineConfig { theta, ..Default::default() };
        let single = PipelineConfig { theta, multi_judge: false, ..Default::default() };
        let m = relabel_loop(&o, &t.goal, &t, &multi, &scripted(&attempts, &seconds));
        let s = relabel_loop(&o, &t.goal, &t, &single, &scripted(&attempts, &seconds));
        if m.path == AcceptancePath::MultiJudge {
            prop_assert!(s.accepted);
        }
        prop_assert!(!m.accepted || s.accepted);
    }
}
