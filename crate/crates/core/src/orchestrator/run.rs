//! Live runs: sampler, event server and workload process under one
//! supervisor.

use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use super::config::{ConfigError, RunConfig, SweepPlan};
use super::dataset::{
    bucket_prompts, load_prompts, write_prompts_jsonl, CommandCounter, DatasetError, TokenCounter,
    WhitespaceCounter,
};
use crate::analysis::{
    replay, AnalysisError, LiveSummary, ReplayError, RunRecord, StopReason, EVENTS_FILE,
    LEDGER_FILE, METRICS_FILE, RUN_FILE, TRACE_FILE,
};
use crate::attribution::EnergyLedger;
use crate::clock::MonotonicClock;
use crate::metrics::MetricsReport;
use crate::phase::{serve, write_events_ndjson, EventKind, IngestError, PhaseEvent};
use crate::report::{emit_json, write_run_outputs, ReportError};
use crate::sampler::{
    open_source, record_trace, CollectingSink, OpenError, SamplerError, SamplingLoop,
    SamplingSummary,
};

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const WORKLOAD_LOG: &str = "workload.log";

pub const ENV_EVENT_ENDPOINT: &str = "TPB_EVENT_ENDPOINT";
pub const ENV_RUN_ID: &str = "TPB_RUN_ID";
pub const ENV_BATCH_SIZE: &str = "TPB_BATCH_SIZE";
pub const ENV_PROMPTS_FILE: &str = "TPB_PROMPTS_FILE";
pub const ENV_QUANT: &str = "TPB_QUANT";
pub const ENV_TP: &str = "TPB_TP";
pub const ENV_PP: &str = "TPB_PP";
pub const ENV_MAX_REQUESTS: &str = "TPB_MAX_REQUESTS";
pub const ENV_MODEL: &str = "TPB_MODEL";
pub const ENV_ENGINE: &str = "TPB_ENGINE";

const POLL: Duration = Duration::from_millis(5);
/// Time a workload gets after exiting for its last events to drain.
const EXIT_DRAIN: Duration = Duration::from_millis(250);
/// Time a workload gets to exit on its own after `RunEnd`.
const EXIT_GRACE: Duration = Duration::from_secs(5);
/// Time a workload gets to send `RunEnd` itself once `max_requests` is hit.
const CAP_GRACE: Duration = Duration::from_secs(1);
const TERM_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Source(#[from] OpenError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot spawn workload `{command}`: {source}")]
    WorkloadSpawnFailed {
        command: String,
        source: std::io::Error,
    },
    #[error("no events received from the workload; partial artifacts in {}", run_dir.display())]
    NoEventsReceived { run_dir: PathBuf },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("run {run_id}: {source}")]
    InSweep {
        run_id: String,
        #[source]
        source: Box<RunError>,
    },
}

impl RunError {
    /// The analysis failure behind this error, if any.
    pub fn analysis(&self) -> Option<&AnalysisError> {
        match self {
            RunError::Replay(ReplayError::Analysis(e)) => Some(e),
            RunError::InSweep { source, .. } => source.analysis(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Artifacts go to `<out_dir>/<run_id>/`.
    pub out_dir: PathBuf,
    /// Substituted for `{harness}` in workload commands.
    pub harness_exe: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            harness_exe: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub trace_path: PathBuf,
    pub events_path: PathBuf,
    pub ledger_path: PathBuf,
    pub metrics_path: PathBuf,
    pub ledger: EnergyLedger,
    pub metrics: MetricsReport,
    pub live: LiveSummary,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:=,+@%".contains(c))
    {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// Replaces `{name}` placeholders with shell-quoted values. Unknown
/// placeholders are left as written.
pub fn expand_command(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), &shell_quote(value));
    }
    out
}

fn prepare_prompts(config: &RunConfig, run_dir: &Path) -> Result<Option<PathBuf>, RunError> {
    let Some(dataset) = &config.dataset else {
        return Ok(None);
    };
    let mut prompts = load_prompts(&dataset.path, dataset.format)?;
    if let Some([lo, hi]) = config.context_bucket {
        let counter: Box<dyn TokenCounter> = match &dataset.token_counter_cmd {
            Some(cmd) => Box::new(CommandCounter {
                command: cmd.clone(),
            }),
            None => Box::new(WhitespaceCounter),
        };
        let mut bucketed = bucket_prompts(&prompts, &[(lo, hi)], counter.as_ref())?;
        if bucketed.dropped > 0 {
            info!("{}: {} prompts outside [{lo}, {hi}) dropped", config.run_id, bucketed.dropped);
        }
        prompts = bucketed.buckets.remove(&(lo, hi)).unwrap_or_default();
        if prompts.is_empty() {
            return Err(DatasetError::EmptyDataset.into());
        }
    }
    let path = run_dir.join(PROMPTS_FILE);
    write_prompts_jsonl(&prompts, &path)?;
    Ok(Some(path))
}

fn terminate(child: &mut Child) -> Option<ExitStatus> {
    let pid = child.id() as libc::pid_t;
    // SAFETY: signalling our own child's process group.
    unsafe { libc::kill(-pid, libc::SIGTERM) };
    let deadline = Instant::now() + TERM_GRACE;
    while Instant::now() < deadline {
        if let Ok(Some(status)) = child.try_wait() {
            return Some(status);
        }
        thread::sleep(POLL);
    }
    // SAFETY: as above.
    unsafe { libc::kill(-pid, libc::SIGKILL) };
    child.wait().ok()
}

fn wait_exit(child: &mut Child, within: Duration) -> Option<ExitStatus> {
    let deadline = Instant::now() + within;
    loop {
        if let Ok(Some(status)) = child.try_wait() {
            return Some(status);
        }
        if Instant::now() >= deadline {
            return terminate(child);
        }
        thread::sleep(POLL);
    }
}

/// ts of the `n`-th `RequestComplete` in timestamp order, once `n` arrived.
fn nth_completion(events: &[PhaseEvent], n: u64) -> Option<u64> {
    let mut ts: Vec<u64> = events
        .iter()
        .filter(|e| e.kind == EventKind::RequestComplete)
        .map(|e| e.ts_ns)
        .collect();
    if (ts.len() as u64) < n {
        return None;
    }
    ts.sort_unstable();
    Some(ts[n as usize - 1])
}

/// Cuts the session at `end_ns` and closes it with a synthesized `RunEnd`,
/// adding a `RunStart` at `start_ns` when the workload never sent one.
fn truncate_session(events: &mut Vec<PhaseEvent>, run_id: &str, start_ns: u64, end_ns: u64) {
    events.retain(|e| e.ts_ns <= end_ns && e.kind != EventKind::RunEnd);
    if !events.iter().any(|e| e.kind == EventKind::RunStart) {
        let first = events.iter().map(|e| e.ts_ns).min().unwrap_or(start_ns);
        events.insert(0, PhaseEvent::run(start_ns.min(first), run_id, EventKind::RunStart));
    }
    events.push(PhaseEvent::run(end_ns, run_id, EventKind::RunEnd));
}

/// Runs one configuration end to end. Trace, events and `run.json` are
/// persisted before analysis, so a failed analysis still leaves them behind.
pub fn execute_run(config: &RunConfig, opts: &RunOptions) -> Result<RunArtifacts, RunError> {
    let run_dir = opts.out_dir.join(&config.run_id);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let prompts_file = prepare_prompts(config, &run_dir)?;
    let handles = config
        .sources
        .iter()
        .map(open_source)
        .collect::<Result<Vec<_>, _>>()?;
    let source_ids: Vec<String> = config.sources.iter().map(|s| s.source_id.clone()).collect();
    let slowest_ms = handles
        .iter()
        .map(|h| h.interval_override_ms().unwrap_or(config.interval_ms))
        .max()
        .unwrap_or(config.interval_ms);
    let sample_wait = Duration::from_millis(slowest_ms * 3) + Duration::from_secs(2);

    let clock = MonotonicClock::start();
    let endpoint = config.endpoint()?;
    let server = serve(&endpoint, clock)?;
    let sink = Arc::new(CollectingSink::new());
    let sampling = SamplingLoop::start(handles, config.interval_ms, sink.clone(), clock)?;

    let have_samples = |ts: u64| source_ids.iter().all(|id| sink.count_at_or_after(id, ts) > 0);
    let deadline = Instant::now() + sample_wait;
    while !have_samples(0) && !sampling.is_finished() && Instant::now() < deadline {
        thread::sleep(POLL);
    }

    let harness = opts
        .harness_exe
        .clone()
        .or_else(|| std::env::current_exe().ok())
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let prompts_text = prompts_file
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let opt = |v: &Option<String>| v.clone().unwrap_or_default();
    let vars = [
        ("run_id", config.run_id.clone()),
        ("endpoint", server.endpoint().to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("prompts_file", prompts_text.clone()),
        ("quantization", opt(&config.quantization)),
        ("tp", config.tp_degree.to_string()),
        ("pp", config.pp_degree.to_string()),
        ("model", opt(&config.model_name)),
        ("engine", opt(&config.engine)),
        ("run_dir", run_dir.display().to_string()),
        ("harness", harness),
    ];
    let command = expand_command(&config.workload_cmd, &vars);
    let log_path = run_dir.join(WORKLOAD_LOG);
    let log = File::create(&log_path).map_err(io_err(&log_path))?;
    let log_err = log.try_clone().map_err(io_err(&log_path))?;
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(log_err)
        .process_group(0)
        .env(ENV_EVENT_ENDPOINT, server.endpoint().to_string())
        .env(ENV_RUN_ID, &config.run_id)
        .env(ENV_BATCH_SIZE, config.batch_size.to_string())
        .env(ENV_PROMPTS_FILE, &prompts_text)
        .env(ENV_QUANT, opt(&config.quantization))
        .env(ENV_TP, config.tp_degree.to_string())
        .env(ENV_PP, config.pp_degree.to_string())
        .env(ENV_MODEL, opt(&config.model_name))
        .env(ENV_ENGINE, opt(&config.engine));
    match config.max_requests {
        Some(n) => cmd.env(ENV_MAX_REQUESTS, n.to_string()),
        None => cmd.env_remove(ENV_MAX_REQUESTS),
    };

    let spawn_ts = clock.now_ns();
    let started = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(child) => child,
        Err(source) => {
            let _ = sampling.stop();
            server.shutdown();
            return Err(RunError::WorkloadSpawnFailed { command, source });
        }
    };
    info!("{}: workload pid {} `{command}`", config.run_id, child.id());

    let mut exited: Option<(ExitStatus, Instant)> = None;
    let mut cap_hit: Option<(u64, Instant)> = None;
    let (stop_reason, synthesized_end) = loop {
        let events = server.events();
        if events.iter().any(|e| e.kind == EventKind::RunEnd) {
            break (StopReason::RunEnd, None);
        }
        if exited.is_none() {
            if let Ok(Some(status)) = child.try_wait() {
                exited = Some((status, Instant::now()));
            }
        }
        if cap_hit.is_none() {
            let now = Instant::now();
            cap_hit = config
                .max_requests
                .and_then(|n| nth_completion(&events, n))
                .map(|ts| (ts, now));
        }
        if let Some((ts, at)) = cap_hit {
            if at.elapsed() >= CAP_GRACE || exited.is_some_and(|(_, e)| e.elapsed() >= EXIT_DRAIN) {
                break (StopReason::MaxRequests, Some(ts));
            }
            thread::sleep(POLL);
            continue;
        }
        if let Some(limit) = config.max_duration_s {
            if started.elapsed().as_secs_f64() >= limit {
                break (StopReason::MaxDuration, Some(clock.now_ns()));
            }
        }
        if let Some((_, at)) = exited {
            if at.elapsed() >= EXIT_DRAIN {
                break (StopReason::WorkloadExited, Some(clock.now_ns()));
            }
        }
        thread::sleep(POLL);
    };
    let status = match exited {
        Some((status, _)) => Some(status),
        None if synthesized_end.is_some() => terminate(&mut child),
        None => wait_exit(&mut child, EXIT_GRACE),
    };
    if synthesized_end.is_some() {
        warn!("{}: stopped by {stop_reason:?}; RunEnd synthesized", config.run_id);
    }

    let end_hint = synthesized_end.unwrap_or_else(|| {
        server
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::RunEnd)
            .map(|e| e.ts_ns)
            .max()
            .unwrap_or(0)
    });
    let deadline = Instant::now() + sample_wait;
    while !have_samples(end_hint) && !sampling.is_finished() && Instant::now() < deadline {
        thread::sleep(POLL);
    }
    let sampled = sampling.stop();
    let (mut events, ingest) = server.shutdown();
    let wall_clock_s = started.elapsed().as_secs_f64();

    let mut samples = sink.take();
    samples.sort_by_key(|s| s.ts_ns);
    let trace_path = run_dir.join(TRACE_FILE);
    record_trace(&samples, &trace_path)?;

    let received_any = !events.is_empty();
    if let Some(end) = synthesized_end {
        if received_any {
            truncate_session(&mut events, &config.run_id, spawn_ts, end);
        }
    }
    events.sort_by_key(|e| e.ts_ns);
    let events_path = run_dir.join(EVENTS_FILE);
    write_events_ndjson(&events, &events_path).map_err(io_err(&events_path))?;

    let sampling_summary = match &sampled {
        Ok(s) => s.clone(),
        Err(SamplerError::AllSourcesFailed { summary }) => summary.clone(),
        Err(_) => SamplingSummary::default(),
    };
    let live = LiveSummary {
        wall_clock_s,
        stop_reason,
        workload_exit_code: status.and_then(|s| s.code()),
        sampling: sampling_summary,
        ingest,
    };
    let mut meta = config.metadata();
    meta.truncated = synthesized_end.is_some();
    let record = RunRecord {
        meta,
        sources: config.sources.clone(),
        live: Some(live.clone()),
    };
    let run_path = run_dir.join(RUN_FILE);
    emit_json(&record, &run_path)?;

    if !received_any {
        return Err(RunError::NoEventsReceived { run_dir });
    }
    sampled?;

    let (recorded, analysis) = replay(&trace_path, &events_path, Some(&run_path))?;
    write_run_outputs(&run_dir, &analysis, &recorded.record)?;
    Ok(RunArtifacts {
        ledger_path: run_dir.join(LEDGER_FILE),
        metrics_path: run_dir.join(METRICS_FILE),
        run_dir,
        trace_path,
        events_path,
        ledger: analysis.ledger,
        metrics: analysis.metrics,
        live,
    })
}

/// Runs every configuration of `plan` in order, one at a time. `progress`
/// sees each finished run with its 1-based index and the total.
pub fn execute_sweep(
    plan: &SweepPlan,
    opts: &RunOptions,
    mut progress: impl FnMut(usize, usize, &RunArtifacts),
) -> Result<Vec<RunArtifacts>, RunError> {
    let total = plan.runs.len();
    let mut out = Vec::with_capacity(total);
    for (i, config) in plan.runs.iter().enumerate() {
        let artifacts = execute_run(config, opts).map_err(|e| RunError::InSweep {
            run_id: config.run_id.clone(),
            source: Box::new(e),
        })?;
        progress(i + 1, total, &artifacts);
        out.push(artifacts);
    }
    Ok(out)
}
