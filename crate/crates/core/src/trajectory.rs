//! Trajectory types, run configuration and the JSONL corpus reader/writer.
//!
//! One trajectory per line:
//!
//! ```text
//! {"id": "...", "goal": "...", "steps": [{"thought": "...", "action": "...",
//!   "observation": "...", "terminal": false}], "failure_label": "...",
//!   "metadata": {"benchmark": "webarena"}}
//! ```
//!
//! `terminal`, `failure_label` and `metadata` are optional. Success corpora
//! use the same shape without `failure_label`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line} (byte offset {offset}): {message}")]
    Malformed {
        line: usize,
        offset: u64,
        message: String,
    },
    #[error("duplicate id {id:?} at line {line} (first seen at line {first_line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },
    #[error("trajectory {id:?}: {reason}")]
    Invariant { id: String, reason: String },
}

/// One thought/action/observation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position, assigned from the step's place in the trajectory.
    #[serde(skip)]
    pub index: usize,
    #[serde(default)]
    pub thought: String,
    pub action: String,
    #[serde(default)]
    pub observation: String,
    /// Summary/terminal actions are the only steps allowed an empty observation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub terminal: bool,
}

impl Step {
    pub fn new(
        thought: impl Into<String>,
        action: impl Into<String>,
        observation: impl Into<String>,
    ) -> Self {
        Step {
            index: 0,
            thought: thought.into(),
            action: action.into(),
            observation: observation.into(),
            terminal: false,
        }
    }

    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub goal: String,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_label: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, goal: impl Into<String>, steps: Vec<Step>) -> Self {
        let mut traj = Trajectory {
            id: id.into(),
            goal: goal.into(),
            steps,
            failure_label: None,
            metadata: BTreeMap::new(),
        };
        traj.renumber();
        traj
    }

    pub fn with_failure_label(mut self, label: impl Into<String>) -> Self {
        self.failure_label = Some(label.into());
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    /// Number of steps (T).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn renumber(&mut self) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            step.index = i + 1;
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::Invariant {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.steps.is_empty() {
            return Err(fail("trajectory has no steps".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i + 1 {
                return Err(fail(format!(
                    "step at position {} carries index {}",
                    i + 1,
                    step.index
                )));
            }
            if step.observation.is_empty() && !step.terminal {
                return Err(fail(format!(
                    "step {} has an empty observation but is not marked terminal",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Last observation that is not blank, used as the final answer when packaging.
    pub fn final_observation(&self) -> Option<&str> {
        self.steps
            .iter()
            .rev()
            .map(|s| s.observation.as_str())
            .find(|o| !o.trim().is_empty())
    }
}

/// A successful demonstration. Serialized exactly like a [`Trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuccessDemo {
    pub trajectory: Trajectory,
}

impl SuccessDemo {
    pub fn goal(&self) -> &str {
        &self.trajectory.goal
    }
}

/// Records that can live in a JSONL corpus file.
pub trait CorpusRecord: Serialize + DeserializeOwned {
    fn id(&self) -> &str;
    fn validate(&self) -> Result<(), CorpusError>;
    /// Restore derived fields after deserialization.
    fn finish(&mut self);
}

impl CorpusRecord for Trajectory {
    fn id(&self) -> &str {
        &self.id
    }
    fn validate(&self) -> Result<(), CorpusError> {
        Trajectory::validate(self)
    }
    fn finish(&mut self) {
        self.renumber();
    }
}

impl CorpusRecord for SuccessDemo {
    fn id(&self) -> &str {
        &self.trajectory.id
    }
    fn validate(&self) -> Result<(), CorpusError> {
        self.trajectory.validate()
    }
    fn finish(&mut self) {
        self.trajectory.renumber();
    }
}

/// Read a JSONL corpus in file order. Blank lines are skipped.
pub fn read_corpus<T: CorpusRecord>(path: impl AsRef<Path>) -> Result<Vec<T>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn parse_corpus<T: CorpusRecord, R: BufRead>(mut reader: R) -> Result<Vec<T>, CorpusError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        let read = reader.read_line(&mut buf).map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let line_start = offset;
        offset += read as u64;
        if buf.trim().is_empty() {
            continue;
        }
        let mut record: T =
            serde_json::from_str(buf.trim_end()).map_err(|e| CorpusError::Malformed {
                line: line_no,
                offset: line_start,
                message: e.to_string(),
            })?;
        record.finish();
        record.validate().map_err(|e| CorpusError::Malformed {
            line: line_no,
            offset: line_start,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(record.id()) {
            return Err(CorpusError::DuplicateId {
                id: record.id().to_string(),
                first_line,
                line: line_no,
            });
        }
        seen.insert(record.id().to_string(), line_no);
        records.push(record);
    }
    Ok(records)
}

/// Write records as JSONL. Every record is validated before the file is created.
pub fn write_corpus<T: CorpusRecord>(
    records: &[T],
    path: impl AsRef<Path>,
) -> Result<usize, CorpusError> {
    let path = path.as_ref();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, record) in records.iter().enumerate() {
        record.validate()?;
        if let Some(&first) = seen.get(record.id()) {
            return Err(CorpusError::DuplicateId {
                id: record.id().to_string(),
                first_line: first,
                line: i + 1,
            });
        }
        seen.insert(record.id(), i + 1);
    }
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| io_err(std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(records.len())
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Rule,
    Judge,
}

impl std::str::FromStr for StageMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(StageMode::Rule),
            "judge" => Ok(StageMode::Judge),
            other => Err(ConfigError(format!(
                "stage mode must be `rule` or `judge`, got {other:?}"
            ))),
        }
    }
}

/// Sampling temperatures for the relabeler and the verifying judge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub first_attempt: f64,
    pub retry: f64,
    pub second_judge: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            first_attempt: 0.3,
            retry: 0.7,
            second_judge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Confidence threshold θ.
    pub theta: f64,
    /// Severity-gate threshold δ.
    pub delta: f64,
    /// Relabeling attempts per trajectory (K).
    pub max_retries: u32,
    pub multi_judge: bool,
    pub stage1_mode: StageMode,
    pub stage2_mode: StageMode,
    pub temperatures: Temperatures,
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            theta: 0.5,
            delta: 0.3,
            max_retries: 3,
            multi_judge: true,
            stage1_mode: StageMode::Rule,
            stage2_mode: StageMode::Rule,
            temperatures: Temperatures::default(),
            concurrency: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("theta", self.theta)?;
        unit("delta", self.delta)?;
        if self.max_retries < 1 {
            return Err(ConfigError("max_retries must be at least 1".into()));
        }
        if self.concurrency < 1 {
            return Err(ConfigError("concurrency must be at least 1".into()));
        }
        let t = &self.temperatures;
        for (name, v) in [
            ("first-attempt temperature", t.first_attempt),
            ("retry temperature", t.retry),
            ("second-judge temperature", t.second_judge),
        ] {
            if !(0.0..=2.0).contains(&v) {
                return Err(ConfigError(format!("{name} must be in [0, 2], got {v}")));
            }
        }
        Ok(())
    }
}
