//! Hindsight goal relabeling for failed LLM-agent trajectories.
//!
//! A failed run is pushed through four stages: failure detection with a
//! severity gate, outcome extraction, goal relabeling behind one or two
//! judges, and packaging into SFT / DPO / ShareGPT records. The
//! [`pipeline`] module drives the stages over a corpus; [`analysis`] and
//! [`synth`] hold the measurement side.

pub mod analysis;
pub mod augment;
pub mod detector;
pub mod judge;
pub mod outcome;
pub mod pipeline;
pub mod relabel;
pub mod synth;
pub mod trajectory;

pub use detector::{FailureAssessment, FailureType, GateVerdict, Lexicon};
pub use judge::{Judge, JudgeError, JudgeRequest, JudgeResponse, TemplateId};
pub use outcome::ReplayOutcome;
pub use pipeline::{RunStats, TrajectoryResult};
pub use relabel::{AcceptancePath, RelabelAttempt, RelabelDecision};
pub use trajectory::{PipelineConfig, Step, SuccessDemo, Trajectory};
