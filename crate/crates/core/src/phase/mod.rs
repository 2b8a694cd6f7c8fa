//! Request lifecycle events and the engine-level phase timeline.
//!
//! Workloads report `PrefillStart`/`PrefillEnd`/`DecodeStart`/`DecodeEnd`/
//! `RequestComplete` per request, bracketed by `RunStart`/`RunEnd`, as
//! newline-delimited JSON. [`validate_events`] checks a collected session and
//! [`build_timeline`] resolves it into contiguous Prefill/Decode/Idle
//! intervals covering the run.

mod server;
mod timeline;
mod validate;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use server::{serve, Endpoint, EventServer, IngestError, IngestStats, MAX_LINE_BYTES, PROTOCOL_VERSION};
pub use timeline::{
    build_timeline, build_timeline_with, EngineInterval, OverlapPolicy, PhaseTimeline,
    PrefillPrecedence, Segment,
};
pub use validate::{validate_events, RequestRecord, Span, ValidatedSession, ValidationError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    RunStart,
    RunEnd,
    PrefillStart,
    PrefillEnd,
    DecodeStart,
    DecodeEnd,
    RequestComplete,
}

impl EventKind {
    pub fn is_run_boundary(self) -> bool {
        matches!(self, EventKind::RunStart | EventKind::RunEnd)
    }

    /// Position in the per-request lifecycle, for request kinds.
    pub(crate) fn lifecycle_index(self) -> Option<usize> {
        match self {
            EventKind::PrefillStart => Some(0),
            EventKind::PrefillEnd => Some(1),
            EventKind::DecodeStart => Some(2),
            EventKind::DecodeEnd => Some(3),
            EventKind::RequestComplete => Some(4),
            EventKind::RunStart | EventKind::RunEnd => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Engine phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
    Idle,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Prefill, Phase::Decode, Phase::Idle];
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
            Phase::Idle => "idle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub ts_ns: u64,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_tokens: Option<u64>,
    /// How the workload derived phase boundaries (e.g. `ttft-approx`); only
    /// meaningful on `RunStart`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_source: Option<String>,
}

impl PhaseEvent {
    pub fn run(ts_ns: u64, run_id: &str, kind: EventKind) -> Self {
        Self {
            ts_ns,
            run_id: run_id.to_string(),
            request_id: None,
            kind,
            prompt_tokens: None,
            generated_tokens: None,
            phase_source: None,
        }
    }

    pub fn request(ts_ns: u64, run_id: &str, request_id: &str, kind: EventKind) -> Self {
        Self {
            request_id: Some(request_id.to_string()),
            ..Self::run(ts_ns, run_id, kind)
        }
    }

    pub fn with_prompt_tokens(mut self, n: u64) -> Self {
        self.prompt_tokens = Some(n);
        self
    }

    pub fn with_generated_tokens(mut self, n: u64) -> Self {
        self.generated_tokens = Some(n);
        self
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LineError {
    #[error("malformed event: {0}")]
    Malformed(String),
    #[error("{0} event without request_id")]
    MissingRequestId(EventKind),
}

/// Parses one protocol line. Unknown keys are ignored; unknown kinds are not.
pub fn parse_event_line(line: &str) -> Result<PhaseEvent, LineError> {
    let event: PhaseEvent =
        serde_json::from_str(line).map_err(|e| LineError::Malformed(e.to_string()))?;
    if !event.kind.is_run_boundary() && event.request_id.is_none() {
        return Err(LineError::MissingRequestId(event.kind));
    }
    Ok(event)
}

pub fn to_event_line(event: &PhaseEvent) -> String {
    serde_json::to_string(event).expect("PhaseEvent serializes")
}

#[derive(Debug, Error)]
pub enum EventFileError {
    #[error("{path}: line {line}: {source}")]
    Line {
        path: String,
        line: u64,
        source: LineError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_events_ndjson(events: &[PhaseEvent], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in events {
        out.write_all(to_event_line(e).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads an events file; blank lines are skipped, any bad line is an error.
pub fn read_events_ndjson(path: impl AsRef<Path>) -> Result<Vec<PhaseEvent>, EventFileError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(parse_event_line(&line).map_err(|source| EventFileError::Line {
            path: path.display().to_string(),
            line: idx as u64 + 1,
            source,
        })?);
    }
    Ok(events)
}
