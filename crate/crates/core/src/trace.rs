//! Episode trace files: one compact JSON object per step, in a pinned
//! field order, so that traces round-trip byte-identically and downstream
//! tools can rely on a stable schema.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EventKind;
use crate::error::{Error, Result};

/// One recorded step. Field order here is the serialised field order and
/// is part of the file format; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Step index within the episode, starting at 0.
    pub step: u64,
    /// Action index taken to reach this step's observation.
    pub action: usize,
    /// Total squared prediction error at this step.
    pub le: f64,
    /// Trailing-window entropy of the surprise stream; null until the
    /// first full window exists.
    pub entropy: Option<f64>,
    pub r_intrinsic: f64,
    pub r_extrinsic: f64,
    /// Grid cell `[row, col]` with the highest uncertainty.
    pub alpha_argmax: [usize; 2],
    /// True on the first step of a new target event.
    pub gt_boundary: bool,
    /// "walk", "turn", "stop", or "none" when no target exists.
    pub gt_event_kind: String,
    pub target_visible: bool,
}

/// Converts the environment's optional event kind into the trace encoding.
pub fn event_kind_label(kind: Option<EventKind>) -> String {
    kind.map_or_else(|| "none".to_string(), |k| k.as_str().to_string())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl_str(text: &str) -> Result<EpisodeTrace> {
        let mut steps = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let step: TraceStep = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("trace line {}: {e}", ln + 1))
            })?;
            steps.push(step);
        }
        Ok(EpisodeTrace { steps })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl_string()?.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<EpisodeTrace> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EpisodeTrace::from_jsonl_str(&text)
    }

    /// Positions (indices into `steps`) flagged as ground-truth boundaries.
    pub fn gt_boundaries(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| if s.gt_boundary { Some(i) } else { None })
            .collect()
    }

    /// The per-step surprise stream.
    pub fn le_stream(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.le).collect()
    }

    /// Ground-truth event label per frame.
    pub fn gt_labels(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.gt_event_kind.as_str()).collect()
    }

    pub fn extrinsic_rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.r_extrinsic).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Sidecar store for per-step controller aggregation vectors: a JSON array
/// of numbers per line, aligned with the trace's steps.
pub fn write_hidden_jsonl(path: &Path, hiddens: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for h in hiddens {
        out.push_str(&serde_json::to_string(h)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_hidden_jsonl(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("hidden-state line {}: {e}", ln + 1)))?;
        out.push(v);
    }
    Ok(out)
}
