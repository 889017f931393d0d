//! Stage 2: what the run actually achieved.
//!
//! Numeric tokens use the pattern
//! `[-+]?(\d{1,3}(,\d{3})+|\d+)(\.\d+)?`: an optional sign, digits with
//! optional thousands separators and an optional decimal part. Currency
//! symbols and unit suffixes are never part of a token (`$5.30/kg` gives
//! `5.30`), and digits glued to letters (`G1`, `gpt4`) are skipped.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::augment::render_trajectory;
use crate::detector::Lexicon;
use crate::judge::{
    call_json, field_str_list, render_template, Judge, JudgeError, JudgeRequest, TemplateId,
};
use crate::trajectory::Trajectory;

pub const MAX_ACHIEVEMENT_CHARS: usize = 200;

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").expect("valid number pattern")
});

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub achievements: Vec<String>,
    pub key_observations: Vec<String>,
    pub numeric_tokens: Vec<String>,
    /// Step index (1-based) backing each achievement.
    pub source_step_indices: Vec<usize>,
}

impl ReplayOutcome {
    pub fn is_empty(&self) -> bool {
        self.achievements.is_empty()
    }

    /// The `{outcome}` binding for the relabeling prompt.
    pub fn to_prompt_json(&self) -> String {
        serde_json::json!({
            "actual_achievements": self.achievements,
            "key_observations": self.key_observations,
        })
        .to_string()
    }

    /// Whether `token` (compared in canonical form) is one of the outcome's numbers.
    pub fn has_number(&self, token: &str) -> bool {
        let want = canonical_number(token);
        self.numeric_tokens.iter().any(|t| canonical_number(t) == want)
    }
}

/// Prefix of at most `max` Unicode scalar values.
pub fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((byte, _)) => &s[..byte],
        None => s,
    }
}

/// Numbers as written in `text`, in order of appearance.
pub fn numeric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for m in NUMBER.find_iter(text) {
        let before = text[..m.start()].chars().next_back();
        let mut tok = m.as_str();
        let glued = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
        if tok.starts_with(['-', '+']) && glued(before) {
            tok = &tok[1..];
        } else if glued(before) {
            continue;
        }
        out.push(tok.to_string());
    }
    out
}

/// Canonical decimal form: separators and a leading `+` removed, trailing
/// fractional zeros dropped, so `5.30` and `5.3` compare equal.
pub fn canonical_number(token: &str) -> String {
    let mut s: String = token.chars().filter(|c| *c != ',').collect();
    if let Some(rest) = s.strip_prefix('+') {
        s = rest.to_string();
    }
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    let (sign, digits) = match s.strip_prefix('-') {
        Some(d) => ("-", d),
        None => ("", s.as_str()),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let body = if frac.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{frac}")
    };
    if body == "0" {
        body
    } else {
        format!("{sign}{body}")
    }
}

fn push_unique(tokens: &mut Vec<String>, seen: &mut HashSet<String>, text: &str) {
    for tok in numeric_tokens(text) {
        if seen.insert(tok.clone()) {
            tokens.push(tok);
        }
    }
}

/// Rule-mode extraction: one achievement per substantive observation.
///
/// `key_observations` holds the achievements that carry at least one number.
pub fn extract_rule(traj: &Trajectory, lex: &Lexicon) -> ReplayOutcome {
    let mut out = ReplayOutcome::default();
    let mut seen_text = HashSet::new();
    let mut seen_num = HashSet::new();
    for step in &traj.steps {
        if !lex.is_substantive(&step.observation) {
            continue;
        }
        let achievement = truncate_chars(step.observation.trim(), MAX_ACHIEVEMENT_CHARS);
        if !seen_text.insert(achievement.to_string()) {
            continue;
        }
        if !numeric_tokens(achievement).is_empty() {
            out.key_observations.push(achievement.to_string());
        }
        push_unique(&mut out.numeric_tokens, &mut seen_num, achievement);
        out.achievements.push(achievement.to_string());
        out.source_step_indices.push(step.index);
    }
    out
}

fn all_observation_numbers(traj: &Trajectory) -> HashSet<String> {
    traj.steps
        .iter()
        .flat_map(|s| numeric_tokens(&s.observation))
        .map(|t| canonical_number(&t))
        .collect()
}

fn words(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(str::to_lowercase)
        .collect()
}

/// The step an achievement most plausibly came from: the first observation
/// sharing one of its numbers, else the largest word overlap (lowest index on ties).
fn source_step(traj: &Trajectory, achievement: &str) -> usize {
    let nums: HashSet<String> = numeric_tokens(achievement)
        .iter()
        .map(|t| canonical_number(t))
        .collect();
    if !nums.is_empty() {
        for step in &traj.steps {
            if numeric_tokens(&step.observation)
                .iter()
                .any(|t| nums.contains(&canonical_number(t)))
            {
                return step.index;
            }
        }
    }
    let want = words(achievement);
    let mut best = (0usize, traj.steps.last().map_or(1, |s| s.index));
    for step in &traj.steps {
        let overlap = words(&step.observation).intersection(&want).count();
        if overlap > best.0 {
            best = (overlap, step.index);
        }
    }
    best.1
}

/// Filled Stage-2 prompt for a trajectory.
pub fn extraction_prompt(traj: &Trajectory) -> Result<String, JudgeError> {
    let rendered = render_trajectory(traj);
    Ok(render_template(
        TemplateId::Stage2,
        &BTreeMap::from([("trajectory", rendered.as_str())]),
    )?)
}

/// Judge-mode extraction with a hallucination guard: any achievement quoting
/// a number that appears in no observation is dropped.
pub fn extract_judge(
    traj: &Trajectory,
    judge: &dyn Judge,
    temperature: f64,
) -> Result<ReplayOutcome, JudgeError> {
    let req = JudgeRequest::new(TemplateId::Stage2, extraction_prompt(traj)?, temperature);
    let (obj, _) = call_json(judge, &req)?;
    let achievements = field_str_list(&obj, "actual_achievements", TemplateId::Stage2)?;
    let key_observations = field_str_list(&obj, "key_observations", TemplateId::Stage2)?;

    let grounded = all_observation_numbers(traj);
    let is_grounded = |text: &str| {
        numeric_tokens(text)
            .iter()
            .all(|t| grounded.contains(&canonical_number(t)))
    };

    let mut out = ReplayOutcome::default();
    let mut seen_text = HashSet::new();
    let mut seen_num = HashSet::new();
    for a in achievements {
        let a = truncate_chars(a.trim(), MAX_ACHIEVEMENT_CHARS).to_string();
        if a.is_empty() || !seen_text.insert(a.clone()) {
            continue;
        }
        if !is_grounded(&a) {
            tracing::warn!(trajectory = %traj.id, achievement = %a, "dropping achievement with ungrounded number");
            continue;
        }
        push_unique(&mut out.numeric_tokens, &mut seen_num, &a);
        out.source_step_indices.push(source_step(traj, &a));
        out.achievements.push(a);
    }
    let mut seen_obs = HashSet::new();
    for k in key_observations {
        let k = k.trim().to_string();
        if k.is_empty() || !seen_obs.insert(k.clone()) {
            continue;
        }
        if !is_grounded(&k) {
            tracing::warn!(trajectory = %traj.id, observation = %k, "dropping key observation with ungrounded number");
            continue;
        }
        push_unique(&mut out.numeric_tokens, &mut seen_num, &k);
        out.key_observations.push(k);
    }
    Ok(out)
}
