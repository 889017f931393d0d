//! Stage 4: packaging accepted relabelings as SFT, DPO and ShareGPT records,
//! plus the severity-weighted DPO loss.
//!
//! All three formats render steps with the same two strings per step
//! (`Thought: …\nAction: …` and `Observation: …`) and end with
//! `Final answer: <last non-empty observation>`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::FailureAssessment;
use crate::judge::{step_agent_text, step_observation_text};
use crate::relabel::RelabelDecision;
use crate::trajectory::Trajectory;

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("weight must be in (0, 1], got {0}")]
    Weight(f64),
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("chosen and rejected goals are identical")]
    SameGoals,
    #[error("non-finite input to dpo_loss")]
    NonFinite,
    #[error("decision for {0} was not accepted")]
    NotAccepted(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Sft,
    Dpo,
    Sharegpt,
}

impl OutputFormat {
    pub const ALL: [OutputFormat; 3] = [OutputFormat::Sft, OutputFormat::Dpo, OutputFormat::Sharegpt];

    pub fn file_name(self) -> &'static str {
        match self {
            OutputFormat::Sft => "sft.jsonl",
            OutputFormat::Dpo => "dpo.jsonl",
            OutputFormat::Sharegpt => "sharegpt.json",
        }
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sft" => Ok(OutputFormat::Sft),
            "dpo" => Ok(OutputFormat::Dpo),
            "sharegpt" => Ok(OutputFormat::Sharegpt),
            other => Err(format!("unknown format {other:?} (expected sft, dpo or sharegpt)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareGptRole {
    Human,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareGptTurn {
    pub from: ShareGptRole,
    pub value: String,
}

/// Turns after the goal: agent turn and observation turn per step, then the
/// final answer when the run produced any output.
pub fn trajectory_turns(traj: &Trajectory) -> Vec<ShareGptTurn> {
    let mut turns = Vec::with_capacity(traj.steps.len() * 2 + 1);
    for step in &traj.steps {
        turns.push(ShareGptTurn {
            from: ShareGptRole::Gpt,
            value: step_agent_text(step),
        });
        turns.push(ShareGptTurn {
            from: ShareGptRole::Human,
            value: step_observation_text(step),
        });
    }
    if let Some(answer) = traj.final_observation() {
        turns.push(ShareGptTurn {
            from: ShareGptRole::Gpt,
            value: format!("Final answer: {answer}"),
        });
    }
    turns
}

/// Text form of a trajectory used in judge prompts and DPO records.
pub fn render_trajectory(traj: &Trajectory) -> String {
    trajectory_turns(traj)
        .into_iter()
        .map(|t| t.value)
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<ChatMessage>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    #[serde(rename = "prompt_chosen")]
    pub chosen_goal: String,
    #[serde(rename = "prompt_rejected")]
    pub rejected_goal: String,
    #[serde(rename = "trajectory")]
    pub trajectory_text: String,
    pub weight: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareGptRecord {
    pub conversations: Vec<ShareGptTurn>,
    pub weight: f64,
}

fn check_weight(weight: f64) -> Result<(), PackError> {
    if weight > 0.0 && weight <= 1.0 {
        Ok(())
    } else {
        Err(PackError::Weight(weight))
    }
}

/// Assistant turn for SFT: each step's thought and action, then the final answer.
pub fn reconstruct_response(traj: &Trajectory) -> String {
    let mut blocks: Vec<String> = traj.steps.iter().map(step_agent_text).collect();
    if let Some(answer) = traj.final_observation() {
        blocks.push(format!("Final answer: {answer}"));
    }
    blocks.join("\n\n")
}

pub fn pack_sft(goal: &str, traj: &Trajectory, weight: f64) -> Result<SftRecord, PackError> {
    check_weight(weight)?;
    Ok(SftRecord {
        messages: vec![
            ChatMessage {
                role: ChatRole::User,
                content: goal.to_string(),
            },
            ChatMessage {
                role: ChatRole::Assistant,
                content: reconstruct_response(traj),
            },
        ],
        weight,
    })
}

pub fn pack_dpo(
    hindsight_goal: &str,
    original_goal: &str,
    traj: &Trajectory,
    weight: f64,
) -> Result<DpoRecord, PackError> {
    pack_dpo_with_beta(hindsight_goal, original_goal, traj, weight, DEFAULT_BETA)
}

pub fn pack_dpo_with_beta(
    hindsight_goal: &str,
    original_goal: &str,
    traj: &Trajectory,
    weight: f64,
    beta: f64,
) -> Result<DpoRecord, PackError> {
    check_weight(weight)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PackError::Beta(beta));
    }
    if hindsight_goal == original_goal {
        return Err(PackError::SameGoals);
    }
    Ok(DpoRecord {
        chosen_goal: hindsight_goal.to_string(),
        rejected_goal: original_goal.to_string(),
        trajectory_text: render_trajectory(traj),
        weight,
        beta,
    })
}

pub fn pack_sharegpt(goal: &str, traj: &Trajectory, weight: f64) -> Result<ShareGptRecord, PackError> {
    check_weight(weight)?;
    let mut conversations = vec![ShareGptTurn {
        from: ShareGptRole::Human,
        value: goal.to_string(),
    }];
    conversations.extend(trajectory_turns(traj));
    Ok(ShareGptRecord {
        conversations,
        weight,
    })
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Severity-weighted DPO loss over a fixed trajectory and two goals:
/// `-w · log σ(β · ((π_c − ref_c) − (π_r − ref_r)))`, with
/// `log σ(x) = −softplus(−x)`.
pub fn dpo_loss(
    logp_chosen_policy: f64,
    logp_chosen_ref: f64,
    logp_rejected_policy: f64,
    logp_rejected_ref: f64,
    beta: f64,
    weight: f64,
) -> Result<f64, PackError> {
    let inputs = [
        logp_chosen_policy,
        logp_chosen_ref,
        logp_rejected_policy,
        logp_rejected_ref,
        beta,
        weight,
    ];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(PackError::NonFinite);
    }
    if beta <= 0.0 {
        return Err(PackError::Beta(beta));
    }
    check_weight(weight)?;
    let margin =
        (logp_chosen_policy - logp_chosen_ref) - (logp_rejected_policy - logp_rejected_ref);
    Ok(weight * dpo_loss_from_inner(beta * margin))
}

/// Unweighted loss as a function of the already-scaled margin.
pub fn dpo_loss_from_inner(inner: f64) -> f64 {
    softplus(-inner)
}

/// One accepted trajectory ready for packaging.
#[derive(Debug, Clone, Copy)]
pub struct AcceptedItem<'a> {
    pub trajectory: &'a Trajectory,
    pub assessment: &'a FailureAssessment,
    pub decision: &'a RelabelDecision,
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), PackError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Write one dataset file in `format`, records in input order.
pub fn emit_dataset(
    items: &[AcceptedItem<'_>],
    format: OutputFormat,
    path: impl AsRef<Path>,
) -> Result<usize, PackError> {
    let path = path.as_ref();
    for item in items {
        if !item.decision.accepted {
            return Err(PackError::NotAccepted(item.trajectory.id.clone()));
        }
    }
    let goal = |i: &AcceptedItem<'_>| i.decision.hindsight_prompt.clone();
    let weight = |i: &AcceptedItem<'_>| i.assessment.severity_weight;
    match format {
        OutputFormat::Sft => {
            let recs = items
                .iter()
                .map(|i| pack_sft(&goal(i), i.trajectory, weight(i)))
                .collect::<Result<Vec<_>, _>>()?;
            write_jsonl(&recs, path)?;
        }
        OutputFormat::Dpo => {
            let recs = items
                .iter()
                .map(|i| pack_dpo(&goal(i), &i.trajectory.goal, i.trajectory, weight(i)))
                .collect::<Result<Vec<_>, _>>()?;
            write_jsonl(&recs, path)?;
        }
        OutputFormat::Sharegpt => {
            let recs = items
                .iter()
                .map(|i| pack_sharegpt(&goal(i), i.trajectory, weight(i)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut out, &recs)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
    }
    Ok(items.len())
}
