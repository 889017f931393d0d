//! End-to-end driver: Stage 1 → gate → Stage 2 → relabel loop over a corpus,
//! plus run statistics and multi-round corpus accumulation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AcceptedItem;
use crate::detector::{detect_judge, detect_rule, severity_gate, FailureAssessment, GateVerdict, Lexicon};
use crate::judge::Judge;
use crate::outcome::{extract_judge, extract_rule, ReplayOutcome};
use crate::relabel::{relabel_loop, AcceptancePath, RelabelDecision};
use crate::trajectory::{ConfigError, PipelineConfig, StageMode, Trajectory};

/// Temperature for judge-mode detection and extraction.
pub const ANALYSIS_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error("round index gap: expected {expected}, got {got}")]
    RoundGap { expected: u32, got: u32 },
    #[error("round {round}: ledger says {declared} accepted but {actual} records were given")]
    CountMismatch { round: u32, declared: u64, actual: u64 },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    DiscardedStage1,
    Accepted,
    Rejected,
}

/// Why a trajectory did not become training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    Unrecoverable,
    LowSeverityWeight,
    EmptyOutcome,
    Stage1Error,
    Stage2Error,
    RelabelError,
    NoValidRelabel,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::Unrecoverable => "unrecoverable",
            ReasonCode::LowSeverityWeight => "low_severity_weight",
            ReasonCode::EmptyOutcome => "empty_outcome",
            ReasonCode::Stage1Error => "stage1_error",
            ReasonCode::Stage2Error => "stage2_error",
            ReasonCode::RelabelError => "relabel_error",
            ReasonCode::NoValidRelabel => "no_valid_relabel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub id: String,
    pub disposition: Disposition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ReasonCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assessment: Option<FailureAssessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ReplayOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<RelabelDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrajectoryResult {
    fn new(id: &str, disposition: Disposition) -> Self {
        TrajectoryResult {
            id: id.to_string(),
            disposition,
            reason: None,
            assessment: None,
            outcome: None,
            decision: None,
            error: None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.disposition == Disposition::Accepted
    }

    /// Accepted decision together with its assessment.
    pub fn accepted_parts(&self) -> Option<(&FailureAssessment, &RelabelDecision)> {
        match (&self.assessment, &self.decision) {
            (Some(a), Some(d)) if self.is_accepted() => Some((a, d)),
            _ => None,
        }
    }

    /// Whether a judge failure, rather than a verdict, ended this trajectory.
    pub fn judge_failed(&self) -> bool {
        matches!(
            self.reason,
            Some(ReasonCode::Stage1Error | ReasonCode::Stage2Error | ReasonCode::RelabelError)
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    pub multi_judge: u64,
    pub single_judge: u64,
    pub fallback: u64,
}

impl PathCounts {
    pub fn total(&self) -> u64 {
        self.multi_judge + self.single_judge + self.fallback
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub total: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub total: u64,
    pub discarded_stage1: u64,
    pub relabel_attempted: u64,
    pub accepted: u64,
    pub accepted_by_path: PathCounts,
    pub rejected: u64,
    pub acceptance_rate: f64,
    /// Keyed by failure type; trajectories whose Stage 1 failed are not counted.
    pub per_failure_type: BTreeMap<String, TypeCounts>,
    /// Trajectories ended by a judge error (a subset of `rejected`).
    pub judge_errors: u64,
}

pub fn acceptance_rate(accepted: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        accepted as f64 / total as f64
    }
}

impl RunStats {
    /// Stats from bare counts; the rejected count is whatever remains.
    pub fn from_counts(total: u64, discarded_stage1: u64, accepted_by_path: PathCounts) -> Self {
        let accepted = accepted_by_path.total();
        let relabel_attempted = total - discarded_stage1;
        RunStats {
            total,
            discarded_stage1,
            relabel_attempted,
            accepted,
            accepted_by_path,
            rejected: relabel_attempted - accepted,
            acceptance_rate: acceptance_rate(accepted, total),
            per_failure_type: BTreeMap::new(),
            judge_errors: 0,
        }
    }

    fn of_result(r: &TrajectoryResult) -> Self {
        let mut s = RunStats {
            total: 1,
            ..RunStats::default()
        };
        match r.disposition {
            Disposition::DiscardedStage1 => s.discarded_stage1 = 1,
            Disposition::Accepted => {
                s.relabel_attempted = 1;
                s.accepted = 1;
                match r.decision.as_ref().map(|d| d.path) {
                    Some(AcceptancePath::MultiJudge) => s.accepted_by_path.multi_judge = 1,
                    Some(AcceptancePath::SingleJudge) => s.accepted_by_path.single_judge = 1,
                    _ => s.accepted_by_path.fallback = 1,
                }
            }
            Disposition::Rejected => {
                s.relabel_attempted = 1;
                s.rejected = 1;
            }
        }
        if r.judge_failed() {
            s.judge_errors = 1;
        }
        if let Some(a) = &r.assessment {
            s.per_failure_type.insert(
                a.failure_type.as_str().to_string(),
                TypeCounts {
                    total: 1,
                    accepted: u64::from(r.is_accepted()),
                },
            );
        }
        s
    }

    pub fn merge(mut self, other: RunStats) -> RunStats {
        self.total += other.total;
        self.discarded_stage1 += other.discarded_stage1;
        self.relabel_attempted += other.relabel_attempted;
        self.accepted += other.accepted;
        self.accepted_by_path.multi_judge += other.accepted_by_path.multi_judge;
        self.accepted_by_path.single_judge += other.accepted_by_path.single_judge;
        self.accepted_by_path.fallback += other.accepted_by_path.fallback;
        self.rejected += other.rejected;
        self.judge_errors += other.judge_errors;
        for (k, v) in other.per_failure_type {
            let e = self.per_failure_type.entry(k).or_default();
            e.total += v.total;
            e.accepted += v.accepted;
        }
        self.acceptance_rate = acceptance_rate(self.accepted, self.total);
        self
    }

    pub fn from_results(results: &[TrajectoryResult]) -> Self {
        results
            .iter()
            .map(RunStats::of_result)
            .fold(RunStats::default(), RunStats::merge)
    }

    /// Checks the bookkeeping identities; returns the first one that fails.
    pub fn check(&self) -> Result<(), String> {
        if self.total != self.discarded_stage1 + self.relabel_attempted {
            return Err(format!(
                "total {} != discarded {} + attempted {}",
                self.total, self.discarded_stage1, self.relabel_attempted
            ));
        }
        if self.relabel_attempted != self.accepted + self.rejected {
            return Err(format!(
                "attempted {} != accepted {} + rejected {}",
                self.relabel_attempted, self.accepted, self.rejected
            ));
        }
        if self.accepted != self.accepted_by_path.total() {
            return Err("per-path counts do not add up to accepted".into());
        }
        if self.acceptance_rate != acceptance_rate(self.accepted, self.total) {
            return Err("acceptance_rate is not accepted / total".into());
        }
        Ok(())
    }

    /// Acceptance rate as printed, e.g. `78.0%`.
    pub fn rate_percent(&self) -> String {
        format!("{:.1}%", self.acceptance_rate * 100.0)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>10}", "total", self.total);
        let _ = writeln!(s, "{:<22}{:>10}", "discarded (stage 1)", self.discarded_stage1);
        let _ = writeln!(s, "{:<22}{:>10}", "relabel attempted", self.relabel_attempted);
        let _ = writeln!(s, "{:<22}{:>10}", "accepted", self.accepted);
        let _ = writeln!(s, "{:<22}{:>10}", "  multi_judge", self.accepted_by_path.multi_judge);
        let _ = writeln!(s, "{:<22}{:>10}", "  single_judge", self.accepted_by_path.single_judge);
        let _ = writeln!(s, "{:<22}{:>10}", "  fallback", self.accepted_by_path.fallback);
        let _ = writeln!(s, "{:<22}{:>10}", "rejected", self.rejected);
        let _ = writeln!(s, "{:<22}{:>10}", "judge errors", self.judge_errors);
        let _ = writeln!(s, "{:<22}{:>10}", "acceptance rate", self.rate_percent());
        if !self.per_failure_type.is_empty() {
            let _ = writeln!(s, "{:<22}{:>10}{:>10}", "failure type", "seen", "accepted");
            for (k, v) in &self.per_failure_type {
                let _ = writeln!(s, "  {:<20}{:>10}{:>10}", k, v.total, v.accepted);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// One entry per input trajectory, in input order.
    pub results: Vec<TrajectoryResult>,
    pub stats: RunStats,
}

impl PipelineOutput {
    /// Accepted results paired with their trajectories, ready for packaging.
    pub fn accepted_items<'a>(&'a self, corpus: &'a [Trajectory]) -> Vec<AcceptedItem<'a>> {
        accepted_items(corpus, &self.results)
    }
}

/// Pair accepted results with the corpus entries sharing their id.
pub fn accepted_items<'a>(corpus: &'a [Trajectory], results: &'a [TrajectoryResult]) -> Vec<AcceptedItem<'a>> {
    let by_id: BTreeMap<&str, &Trajectory> = corpus.iter().map(|t| (t.id.as_str(), t)).collect();
    results
        .iter()
        .filter_map(|r| {
            let (assessment, decision) = r.accepted_parts()?;
            let trajectory = by_id.get(r.id.as_str())?;
            Some(AcceptedItem {
                trajectory,
                assessment,
                decision,
            })
        })
        .collect()
}

/// Run one trajectory through all stages.
pub fn process_trajectory(
    traj: &Trajectory,
    cfg: &PipelineConfig,
    judge: &dyn Judge,
    lexicon: &Lexicon,
) -> TrajectoryResult {
    let assessment = match cfg.stage1_mode {
        StageMode::Rule => detect_rule(traj, lexicon),
        StageMode::Judge => match detect_judge(traj, judge, ANALYSIS_TEMPERATURE) {
            Ok(a) => a,
            Err(e) => {
                tracing::warn!(trajectory = %traj.id, error = %e, "stage 1 failed");
                let mut r = TrajectoryResult::new(&traj.id, Disposition::Rejected);
                r.reason = Some(ReasonCode::Stage1Error);
                r.error = Some(e.to_string());
                return r;
            }
        },
    };

    if severity_gate(&assessment, cfg.delta) == GateVerdict::Discard {
        let mut r = TrajectoryResult::new(&traj.id, Disposition::DiscardedStage1);
        r.reason = Some(if assessment.recoverable {
            ReasonCode::LowSeverityWeight
        } else {
            ReasonCode::Unrecoverable
        });
        r.assessment = Some(assessment);
        return r;
    }

    let outcome = match cfg.stage2_mode {
        StageMode::Rule => extract_rule(traj, lexicon),
        StageMode::Judge => match extract_judge(traj, judge, ANALYSIS_TEMPERATURE) {
            Ok(o) => o,
            Err(e) => {
                tracing::warn!(trajectory = %traj.id, error = %e, "stage 2 failed");
                let mut r = TrajectoryResult::new(&traj.id, Disposition::Rejected);
                r.reason = Some(ReasonCode::Stage2Error);
                r.assessment = Some(assessment);
                r.error = Some(e.to_string());
                return r;
            }
        },
    };
    if outcome.is_empty() {
        let mut r = TrajectoryResult::new(&traj.id, Disposition::DiscardedStage1);
        r.reason = Some(ReasonCode::EmptyOutcome);
        r.assessment = Some(assessment);
        r.outcome = Some(outcome);
        return r;
    }

    let decision = relabel_loop(&outcome, &traj.goal, traj, cfg, judge);
    let mut r = TrajectoryResult::new(
        &traj.id,
        if decision.accepted {
            Disposition::Accepted
        } else {
            Disposition::Rejected
        },
    );
    if !decision.accepted {
        let all_errored = decision.attempts.iter().all(|a| a.error.is_some());
        r.reason = Some(if all_errored {
            ReasonCode::RelabelError
        } else {
            ReasonCode::NoValidRelabel
        });
        if all_errored {
            r.error = decision.attempts.last().and_then(|a| a.error.clone());
        }
    }
    r.assessment = Some(assessment);
    r.outcome = Some(outcome);
    r.decision = Some(decision);
    r
}

pub fn run_pipeline(
    corpus: &[Trajectory],
    cfg: &PipelineConfig,
    judge: &dyn Judge,
) -> Result<PipelineOutput, PipelineError> {
    run_pipeline_with(corpus, cfg, judge, &Lexicon::default())
}

/// Results come back in input order whatever `cfg.concurrency` is.
pub fn run_pipeline_with(
    corpus: &[Trajectory],
    cfg: &PipelineConfig,
    judge: &dyn Judge,
    lexicon: &Lexicon,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let results: Vec<TrajectoryResult> = if cfg.concurrency <= 1 {
        corpus
            .iter()
            .map(|t| process_trajectory(t, cfg, judge, lexicon))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.concurrency)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        pool.install(|| {
            corpus
                .par_iter()
                .map(|t| process_trajectory(t, cfg, judge, lexicon))
                .collect()
        })
    };
    let stats = RunStats::from_results(&results);
    debug_assert!(stats.check().is_ok());
    Ok(PipelineOutput { results, stats })
}

#[derive(Debug, Serialize)]
struct RejectLine<'a> {
    id: &'a str,
    disposition: Disposition,
    reason: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// Every non-accepted trajectory with its reason code, one JSON object per line.
pub fn write_rejects(results: &[TrajectoryResult], path: impl AsRef<Path>) -> Result<usize, PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut n = 0;
    for r in results.iter().filter(|r| !r.is_accepted()) {
        let line = RejectLine {
            id: &r.id,
            disposition: r.disposition,
            reason: r.reason.map_or("unknown", ReasonCode::as_str),
            error: r.error.as_deref(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn write_results(results: &[TrajectoryResult], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<TrajectoryResult>, PipelineError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Processed ids, one per line, in processing order.
pub fn write_checkpoint(results: &[TrajectoryResult], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in results {
        writeln!(out, "{}", r.id)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<BTreeSet<String>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round_index: u32,
    pub source_label: String,
    pub new_failures: u64,
    pub accepted: u64,
    pub cumulative_corpus_size: u64,
}

impl RoundLedger {
    /// Entry with the cumulative size left for [`accumulate_round`] to fill.
    pub fn new(round_index: u32, source_label: impl Into<String>, new_failures: u64, accepted: u64) -> Self {
        RoundLedger {
            round_index,
            source_label: source_label.into(),
            new_failures,
            accepted,
            cumulative_corpus_size: 0,
        }
    }
}

/// One relabeled pair in an accumulated multi-round corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedPair {
    pub id: String,
    pub round: u32,
    pub hindsight_goal: String,
    pub original_goal: String,
    pub weight: f64,
    pub trajectory: Trajectory,
}

impl AccumulatedPair {
    pub fn from_item(item: &AcceptedItem<'_>) -> Self {
        AccumulatedPair {
            id: item.trajectory.id.clone(),
            round: 0,
            hindsight_goal: item.decision.hindsight_prompt.clone(),
            original_goal: item.trajectory.goal.clone(),
            weight: item.assessment.severity_weight,
            trajectory: item.trajectory.clone(),
        }
    }
}

fn round_prefix(round: u32) -> String {
    format!("r{round}/")
}

/// Append a round: new ids get a `r<round>/` prefix so they cannot collide
/// with earlier rounds, and the cumulative size carries forward.
pub fn accumulate_round(
    ledger: &[RoundLedger],
    mut new: RoundLedger,
    prior: Vec<AccumulatedPair>,
    new_accepted: Vec<AccumulatedPair>,
) -> Result<(Vec<AccumulatedPair>, Vec<RoundLedger>), PipelineError> {
    let expected = ledger.last().map_or(0, |l| l.round_index + 1);
    if new.round_index != expected {
        return Err(PipelineError::RoundGap {
            expected,
            got: new.round_index,
        });
    }
    if new.accepted != new_accepted.len() as u64 {
        return Err(PipelineError::CountMismatch {
            round: new.round_index,
            declared: new.accepted,
            actual: new_accepted.len() as u64,
        });
    }
    let prefix = round_prefix(new.round_index);
    let mut merged = prior;
    merged.extend(new_accepted.into_iter().map(|mut p| {
        p.round = new.round_index;
        if !p.id.starts_with(&prefix) {
            p.id = format!("{prefix}{}", p.id);
        }
        p
    }));
    new.cumulative_corpus_size = ledger.last().map_or(0, |l| l.cumulative_corpus_size) + new.accepted;
    let mut ledger = ledger.to_vec();
    ledger.push(new);
    Ok((merged, ledger))
}
