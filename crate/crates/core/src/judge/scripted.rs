use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fingerprint, Judge, JudgeError, JudgeRequest, JudgeResponse, TemplateId};

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub raw_text: String,
}

impl TranscriptEntry {
    pub fn for_prompt(template: TemplateId, filled_prompt: &str, raw_text: impl Into<String>) -> Self {
        TranscriptEntry {
            fingerprint: fingerprint(template, filled_prompt),
            raw_text: raw_text.into(),
        }
    }
}

/// Replays a recorded transcript.
///
/// Entries sharing a fingerprint are served in file order, one per call, and
/// the last one keeps being served once the sequence runs out. This lets a
/// transcript script the retries of a request whose prompt does not change
/// between attempts.
#[derive(Debug, Default)]
pub struct ScriptedJudge {
    replies: HashMap<String, Vec<String>>,
    cursor: Mutex<HashMap<String, usize>>,
}

impl ScriptedJudge {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut replies: HashMap<String, Vec<String>> = HashMap::new();
        for e in entries {
            replies.entry(e.fingerprint).or_default().push(e.raw_text);
        }
        ScriptedJudge {
            replies,
            cursor: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, JudgeError> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| JudgeError::Transport(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| JudgeError::Transport(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| {
                JudgeError::Transport(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        Ok(ScriptedJudge::new(entries))
    }

    pub fn len(&self) -> usize {
        self.replies.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl Judge for ScriptedJudge {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let started = Instant::now();
        let fp = req.fingerprint();
        let Some(seq) = self.replies.get(&fp) else {
            return Err(JudgeError::TranscriptMiss {
                template: req.template_id,
                fingerprint: fp,
            });
        };
        let raw = {
            let mut cursor = self.cursor.lock().expect("cursor lock poisoned");
            let next = cursor.entry(fp).or_insert(0);
            let raw = seq[(*next).min(seq.len() - 1)].clone();
            *next += 1;
            raw
        };
        Ok(JudgeResponse::new(raw, started.elapsed(), 1))
    }
}

/// Wraps a judge and keeps every exchange so it can be saved as a transcript.
pub struct TranscriptRecorder<J> {
    inner: J,
    log: Mutex<Vec<TranscriptEntry>>,
}

impl<J: Judge> TranscriptRecorder<J> {
    pub fn new(inner: J) -> Self {
        TranscriptRecorder {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.log.lock().expect("log lock poisoned").clone()
    }

    /// Entries are grouped by fingerprint (stable, so replay order within a
    /// fingerprint is kept); the file does not depend on thread scheduling.
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<usize> {
        let mut entries = self.entries();
        entries.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        let mut out = BufWriter::new(File::create(path)?);
        for e in &entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(entries.len())
    }
}

impl<J: Judge> Judge for TranscriptRecorder<J> {
    fn call(&self, req: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        let resp = self.inner.call(req)?;
        self.log
            .lock()
            .expect("log lock poisoned")
            .push(TranscriptEntry {
                fingerprint: req.fingerprint(),
                raw_text: resp.raw_text.clone(),
            });
        Ok(resp)
    }
}
