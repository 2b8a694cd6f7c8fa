use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EventKind, PhaseEvent};

/// Half-open nanosecond interval `[start_ns, end_ns)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl Span {
    pub fn new(start_ns: u64, end_ns: u64) -> Self {
        debug_assert!(start_ns <= end_ns);
        Self { start_ns, end_ns }
    }

    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }

    /// True if `[a, b)` lies inside this span.
    pub fn covers(&self, a: u64, b: u64) -> bool {
        self.start_ns <= a && b <= self.end_ns
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub prefill: Span,
    /// Absent if the run ended before decoding started.
    pub decode: Option<Span>,
    pub prompt_tokens: u64,
    pub generated_tokens: Option<u64>,
    /// False when the run ended before `RequestComplete`; such requests still
    /// shape the engine timeline (truncated at `RunEnd`) but are excluded from
    /// per-request metrics.
    pub complete: bool,
}

impl RequestRecord {
    /// Time to first token: prefill start to prefill end.
    pub fn ttft_ns(&self) -> u64 {
        self.prefill.duration_ns()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedSession {
    pub run_id: String,
    pub run: Span,
    pub requests: BTreeMap<String, RequestRecord>,
    pub phase_source: Option<String>,
}

impl ValidatedSession {
    pub fn incomplete_requests(&self) -> usize {
        self.requests.values().filter(|r| !r.complete).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("no events")]
    Empty,
    #[error("events from several runs: expected {expected}, found {found}")]
    MixedRuns { expected: String, found: String },
    #[error("missing {0}")]
    MissingRunBoundary(EventKind),
    #[error("duplicate {0}")]
    DuplicateRunBoundary(EventKind),
    #[error("RunEnd precedes RunStart")]
    RunBoundsInverted,
    #[error("{kind} event without request_id")]
    MissingRequestId { kind: EventKind },
    #[error("order violation in request {request_id}")]
    OrderViolation { request_id: String },
    #[error("missing token count in request {request_id}")]
    MissingTokenCount { request_id: String },
    #[error("invalid token count in request {request_id}")]
    InvalidTokenCount { request_id: String },
    #[error("duplicate {kind} in request {request_id}")]
    DuplicateEvent { request_id: String, kind: EventKind },
}

impl ValidationError {
    pub fn request_id(&self) -> Option<&str> {
        match self {
            ValidationError::OrderViolation { request_id }
            | ValidationError::MissingTokenCount { request_id }
            | ValidationError::InvalidTokenCount { request_id }
            | ValidationError::DuplicateEvent { request_id, .. } => Some(request_id),
            _ => None,
        }
    }
}

/// Checks one run's events: a single `RunStart`/`RunEnd` pair bracketing the
/// rest, per-request lifecycle order, and required token counts.
///
/// Events may arrive in any order (several connections); they are merged by
/// timestamp here.
pub fn validate_events(events: &[PhaseEvent]) -> Result<ValidatedSession, ValidationError> {
    let first = events.first().ok_or(ValidationError::Empty)?;
    let run_id = first.run_id.clone();

    let mut sorted: Vec<&PhaseEvent> = events.iter().collect();
    sorted.sort_by_key(|e| e.ts_ns);

    let mut run_start: Option<&PhaseEvent> = None;
    let mut run_end: Option<&PhaseEvent> = None;
    let mut per_request: BTreeMap<&str, [Option<&PhaseEvent>; 5]> = BTreeMap::new();

    for e in &sorted {
        if e.run_id != run_id {
            return Err(ValidationError::MixedRuns {
                expected: run_id,
                found: e.run_id.clone(),
            });
        }
        let slot = match e.kind {
            EventKind::RunStart => &mut run_start,
            EventKind::RunEnd => &mut run_end,
            kind => {
                let request_id = e
                    .request_id
                    .as_deref()
                    .ok_or(ValidationError::MissingRequestId { kind })?;
                let idx = kind.lifecycle_index().expect("request kind");
                let slots = per_request.entry(request_id).or_default();
                if slots[idx].is_some() {
                    return Err(ValidationError::DuplicateEvent {
                        request_id: request_id.to_string(),
                        kind,
                    });
                }
                slots[idx] = Some(e);
                continue;
            }
        };
        if slot.is_some() {
            return Err(ValidationError::DuplicateRunBoundary(e.kind));
        }
        *slot = Some(e);
    }

    let start = run_start.ok_or(ValidationError::MissingRunBoundary(EventKind::RunStart))?;
    let end = run_end.ok_or(ValidationError::MissingRunBoundary(EventKind::RunEnd))?;
    if end.ts_ns < start.ts_ns {
        return Err(ValidationError::RunBoundsInverted);
    }
    let run = Span::new(start.ts_ns, end.ts_ns);

    let mut requests = BTreeMap::new();
    for (request_id, slots) in per_request {
        let order_violation = || ValidationError::OrderViolation {
            request_id: request_id.to_string(),
        };
        // Lifecycle must be a prefix: no event without all of its predecessors.
        let present = slots.iter().take_while(|s| s.is_some()).count();
        if slots[present..].iter().any(Option::is_some) || present == 0 {
            return Err(order_violation());
        }
        let ts: Vec<u64> = slots[..present].iter().map(|s| s.unwrap().ts_ns).collect();
        if ts.windows(2).any(|w| w[0] > w[1]) {
            return Err(order_violation());
        }
        if ts[0] < run.start_ns || ts[present - 1] > run.end_ns {
            return Err(order_violation());
        }

        let prompt_tokens = slots[0].unwrap().prompt_tokens.ok_or_else(|| {
            ValidationError::MissingTokenCount {
                request_id: request_id.to_string(),
            }
        })?;
        if prompt_tokens == 0 {
            return Err(ValidationError::InvalidTokenCount {
                request_id: request_id.to_string(),
            });
        }
        let complete = present == 5;
        let generated_tokens = if complete {
            Some(slots[4].unwrap().generated_tokens.ok_or_else(|| {
                ValidationError::MissingTokenCount {
                    request_id: request_id.to_string(),
                }
            })?)
        } else {
            None
        };

        let end_or_run = |i: usize| ts.get(i).copied().unwrap_or(run.end_ns);
        let prefill = Span::new(ts[0], end_or_run(1));
        let decode = ts.get(2).map(|&s| Span::new(s, end_or_run(3)));
        requests.insert(
            request_id.to_string(),
            RequestRecord {
                prefill,
                decode,
                prompt_tokens,
                generated_tokens,
                complete,
            },
        );
    }

    Ok(ValidatedSession {
        run_id,
        run,
        requests,
        phase_source: start.phase_source.clone(),
    })
}
