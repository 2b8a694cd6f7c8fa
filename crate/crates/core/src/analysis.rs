//! The offline half of the pipeline: events and samples in, timeline, ledger
//! and metrics out. Live runs and replays both go through [`analyze`], so
//! their outputs agree byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{attribute, AttributionError, EnergyLedger};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport, RunMetadata, SamplesSummary};
use crate::phase::{
    build_timeline, read_events_ndjson, validate_events, EventFileError, PhaseEvent,
    PhaseTimeline, ValidationError,
};
use crate::phase::IngestStats;
use crate::sampler::{replay_trace, Domain, PowerSample, SamplerError, SamplingSummary, SourceSpec};

pub const TRACE_FILE: &str = "trace.csv";
pub const EVENTS_FILE: &str = "events.ndjson";
pub const LEDGER_FILE: &str = "ledger.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_FILE: &str = "run.json";

/// Why a live run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RunEnd,
    MaxRequests,
    MaxDuration,
    WorkloadExited,
}

/// Facts about a live run that replay cannot reproduce; kept out of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveSummary {
    pub wall_clock_s: f64,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload_exit_code: Option<i32>,
    pub sampling: SamplingSummary,
    pub ingest: IngestStats,
}

/// Persisted as `run.json` next to a run's trace and events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMetadata,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub live: Option<LiveSummary>,
}

impl RunRecord {
    pub fn new(meta: RunMetadata) -> Self {
        Self {
            meta,
            sources: Vec::new(),
            live: None,
        }
    }

    pub fn domains(&self) -> BTreeMap<String, Domain> {
        self.sources
            .iter()
            .map(|s| (s.source_id.clone(), s.domain))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run record is for {record} but events are for {events}")]
    RunIdMismatch { record: String, events: String },
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub timeline: PhaseTimeline,
    pub ledger: EnergyLedger,
    pub metrics: MetricsReport,
}

pub fn analyze(
    samples: &[PowerSample],
    events: &[PhaseEvent],
    record: &RunRecord,
) -> Result<Analysis, AnalysisError> {
    let session = validate_events(events)?;
    if session.run_id != record.meta.run_id {
        return Err(AnalysisError::RunIdMismatch {
            record: record.meta.run_id.clone(),
            events: session.run_id,
        });
    }
    let timeline = build_timeline(&session);
    let domains = record.domains();
    let ledger = attribute(samples, &domains, &timeline)?;
    let summary = SamplesSummary::from_samples(samples, &domains, timeline.run_interval);
    let metrics = compute_metrics(&ledger, &timeline, &summary, &record.meta)?;
    Ok(Analysis {
        timeline,
        ledger,
        metrics,
    })
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Trace(#[from] SamplerError),
    #[error(transparent)]
    Events(#[from] EventFileError),
    #[error("{path}: {detail}")]
    Record { path: PathBuf, detail: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Inputs of a recorded run, read back from disk.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub samples: Vec<PowerSample>,
    pub events: Vec<PhaseEvent>,
    pub record: RunRecord,
}

/// Loads a trace and an events file. The run record comes from `record_path`,
/// else from a `run.json` beside the trace, else is a bare record for the
/// events' run id (source domains then inferred from ids).
pub fn load_recorded(
    trace_path: &Path,
    events_path: &Path,
    record_path: Option<&Path>,
) -> Result<Recorded, ReplayError> {
    let samples = replay_trace(trace_path)?;
    let events = read_events_ndjson(events_path)?;
    let sibling = trace_path.with_file_name(RUN_FILE);
    let record_path = record_path.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling));
    let record = match record_path {
        Some(path) => crate::report::read_json::<RunRecord>(&path).map_err(|e| ReplayError::Record {
            path: path.clone(),
            detail: e.to_string(),
        })?,
        None => {
            let run_id = events
                .iter()
                .find(|e| e.kind == crate::phase::EventKind::RunStart)
                .or(events.first())
                .map(|e| e.run_id.clone())
                .unwrap_or_default();
            RunRecord::new(RunMetadata::new(run_id))
        }
    };
    Ok(Recorded {
        samples,
        events,
        record,
    })
}

pub fn replay(
    trace_path: &Path,
    events_path: &Path,
    record_path: Option<&Path>,
) -> Result<(Recorded, Analysis), ReplayError> {
    let recorded = load_recorded(trace_path, events_path, record_path)?;
    let analysis = analyze(&recorded.samples, &recorded.events, &recorded.record)?;
    Ok((recorded, analysis))
}
