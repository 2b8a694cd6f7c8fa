//! Scripted workload: connects to the event endpoint, reads the clock epoch
//! from the handshake and emits a fixed request schedule in real time.
//!
//! Requests run in waves of `concurrency`. Within a wave, prefills run back to
//! back and each request decodes right after its own prefill, so later
//! prefills overlap earlier decodes.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::MonotonicClock;
use crate::orchestrator::{load_prompts, DatasetError, PromptFormat};
use crate::phase::{to_event_line, Endpoint, EventKind, PhaseEvent, PROTOCOL_VERSION};

pub const ENV_ENDPOINT: &str = "TPB_EVENT_ENDPOINT";
pub const ENV_RUN_ID: &str = "TPB_RUN_ID";
pub const ENV_BATCH_SIZE: &str = "TPB_BATCH_SIZE";
pub const ENV_PROMPTS_FILE: &str = "TPB_PROMPTS_FILE";
pub const ENV_MAX_REQUESTS: &str = "TPB_MAX_REQUESTS";

const DEFAULT_PROMPT_TOKENS: u64 = 32;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("cannot connect to {endpoint}: {source}")]
    Connect {
        endpoint: String,
        source: std::io::Error,
    },
    #[error("bad handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Prompts(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverOptions {
    pub endpoint: Endpoint,
    pub run_id: String,
    pub requests: usize,
    pub concurrency: usize,
    pub prefill_ms: u64,
    pub decode_ms: u64,
    /// Idle time after `RunStart` and before `RunEnd`.
    pub idle_ms: u64,
    pub ms_per_token: u64,
    pub prompts_file: Option<PathBuf>,
    pub phase_source: String,
    /// Exit without sending `RunEnd`, as a crashed workload would.
    pub skip_run_end: bool,
}

impl DriverOptions {
    pub fn new(endpoint: Endpoint, run_id: impl Into<String>) -> Self {
        Self {
            endpoint,
            run_id: run_id.into(),
            requests: 4,
            concurrency: 1,
            prefill_ms: 40,
            decode_ms: 120,
            idle_ms: 50,
            ms_per_token: 10,
            prompts_file: None,
            phase_source: "scripted".into(),
            skip_run_end: false,
        }
    }

    /// Endpoint, run id, concurrency and prompts from the harness environment.
    pub fn from_env() -> Result<Self, DriverError> {
        let var = |name: &'static str| std::env::var(name).map_err(|_| DriverError::MissingEnv(name));
        let endpoint_text = var(ENV_ENDPOINT)?;
        let endpoint = endpoint_text.parse().map_err(|_| DriverError::BadValue {
            key: ENV_ENDPOINT.into(),
            value: endpoint_text,
        })?;
        let mut opts = Self::new(endpoint, var(ENV_RUN_ID)?);
        if let Ok(batch) = var(ENV_BATCH_SIZE) {
            opts.set("concurrency", &batch)?;
        }
        if let Ok(n) = var(ENV_MAX_REQUESTS) {
            opts.set("requests", &n)?;
        }
        if let Ok(path) = var(ENV_PROMPTS_FILE) {
            if !path.is_empty() {
                opts.prompts_file = Some(PathBuf::from(path));
            }
        }
        Ok(opts)
    }

    /// Applies one `--key value` style option.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DriverError> {
        let bad = || DriverError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let num = || value.parse::<u64>().map_err(|_| bad());
        match key {
            "requests" => self.requests = num()? as usize,
            "concurrency" => self.concurrency = (num()? as usize).max(1),
            "prefill-ms" => self.prefill_ms = num()?,
            "decode-ms" => self.decode_ms = num()?,
            "idle-ms" => self.idle_ms = num()?,
            "ms-per-token" => self.ms_per_token = num()?.max(1),
            "phase-source" => self.phase_source = value.to_string(),
            "prompts" => self.prompts_file = Some(PathBuf::from(value)),
            "skip-run-end" => self.skip_run_end = value.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
        Ok(())
    }
}

/// One planned event: offset from run start in ms, in emission order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedEvent {
    pub offset_ms: u64,
    pub request: Option<usize>,
    pub kind: EventKind,
}

/// The schedule `drive` plays, excluding `RunStart`.
pub fn plan(opts: &DriverOptions) -> Vec<PlannedEvent> {
    let mut out = Vec::new();
    let mut wave_start = opts.idle_ms;
    let mut end = wave_start;
    let ev = |offset_ms, request, kind| PlannedEvent {
        offset_ms,
        request,
        kind,
    };
    for wave in (0..opts.requests).collect::<Vec<_>>().chunks(opts.concurrency.max(1)) {
        for (j, &i) in wave.iter().enumerate() {
            let start = wave_start + j as u64 * opts.prefill_ms;
            let decode = start + opts.prefill_ms;
            let done = decode + opts.decode_ms;
            out.extend([
                ev(start, Some(i), EventKind::PrefillStart),
                ev(decode, Some(i), EventKind::PrefillEnd),
                ev(decode, Some(i), EventKind::DecodeStart),
                ev(done, Some(i), EventKind::DecodeEnd),
                ev(done, Some(i), EventKind::RequestComplete),
            ]);
            end = end.max(done);
        }
        wave_start = end;
    }
    if !opts.skip_run_end {
        out.push(ev(end + opts.idle_ms, None, EventKind::RunEnd));
    }
    // Stable: events sharing an offset keep lifecycle order.
    out.sort_by_key(|e| e.offset_ms);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DriverSummary {
    pub events_sent: usize,
    pub requests: usize,
}

type Connection = (Box<dyn BufRead>, Box<dyn Write>);

fn connect(endpoint: &Endpoint) -> Result<Connection, DriverError> {
    let err = |source| DriverError::Connect {
        endpoint: endpoint.to_string(),
        source,
    };
    Ok(match endpoint {
        Endpoint::Tcp(addr) => {
            let s = TcpStream::connect(addr).map_err(err)?;
            s.set_nodelay(true).map_err(err)?;
            (Box::new(BufReader::new(s.try_clone()?)), Box::new(s))
        }
        Endpoint::Unix(path) => {
            let s = UnixStream::connect(path).map_err(err)?;
            (Box::new(BufReader::new(s.try_clone()?)), Box::new(s))
        }
    })
}

fn read_handshake(reader: &mut dyn BufRead) -> Result<MonotonicClock, DriverError> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let v: serde_json::Value =
        serde_json::from_str(&line).map_err(|e| DriverError::Handshake(e.to_string()))?;
    if v["proto"].as_u64() != Some(u64::from(PROTOCOL_VERSION)) {
        return Err(DriverError::Handshake(format!("unsupported protocol in {line:?}")));
    }
    let epoch = v["epoch_ns"]
        .as_u64()
        .ok_or_else(|| DriverError::Handshake(format!("no epoch_ns in {line:?}")))?;
    Ok(MonotonicClock::from_epoch(epoch))
}

fn prompt_tokens(prompts: &[String], i: usize) -> u64 {
    if prompts.is_empty() {
        return DEFAULT_PROMPT_TOKENS;
    }
    (prompts[i % prompts.len()].split_whitespace().count() as u64).max(1)
}

/// Plays the schedule against the harness.
pub fn drive(opts: &DriverOptions) -> Result<DriverSummary, DriverError> {
    let prompts = match &opts.prompts_file {
        Some(path) => load_prompts(path, PromptFormat::Jsonl)?,
        None => Vec::new(),
    };
    let (mut reader, mut writer) = connect(&opts.endpoint)?;
    let clock = read_handshake(reader.as_mut())?;
    // Stamps are scheduled offsets from `base_ns`: late wake-ups never
    // distort phase durations, and reading the base first keeps every stamp
    // at or behind the clock.
    let base_ns = clock.now_ns();
    let started = Instant::now();
    let mut send = |event: PhaseEvent| -> Result<(), DriverError> {
        writer.write_all(to_event_line(&event).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    };

    let run_id = opts.run_id.as_str();
    send(PhaseEvent {
        phase_source: Some(opts.phase_source.clone()),
        ..PhaseEvent::run(base_ns, run_id, EventKind::RunStart)
    })?;
    let generated = (opts.decode_ms / opts.ms_per_token).max(1);
    let schedule = plan(opts);
    let mut sent = 1;
    for p in &schedule {
        let due = started + Duration::from_millis(p.offset_ms);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        let ts_ns = base_ns + p.offset_ms * 1_000_000;
        let event = match p.request {
            None => PhaseEvent::run(ts_ns, run_id, p.kind),
            Some(i) => {
                let id = format!("req-{i:04}");
                let e = PhaseEvent::request(ts_ns, run_id, &id, p.kind);
                match p.kind {
                    EventKind::PrefillStart => e.with_prompt_tokens(prompt_tokens(&prompts, i)),
                    EventKind::RequestComplete => e.with_generated_tokens(generated),
                    _ => e,
                }
            }
        };
        send(event)?;
        sent += 1;
    }
    Ok(DriverSummary {
        events_sent: sent,
        requests: opts.requests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{serve, validate_events};

    fn opts() -> DriverOptions {
        DriverOptions::new(Endpoint::loopback(), "r")
    }

    #[test]
    fn plan_overlaps_prefill_with_decode_within_a_wave() {
        let o = DriverOptions {
            requests: 3,
            concurrency: 2,
            ..opts()
        };
        let p = plan(&o);
        let at = |i: usize, k: EventKind| {
            p.iter()
                .find(|e| e.request == Some(i) && e.kind == k)
                .unwrap()
                .offset_ms
        };
        assert_eq!(at(0, EventKind::PrefillStart), 50);
        assert_eq!(at(1, EventKind::PrefillStart), 90);
        assert!(at(1, EventKind::PrefillStart) < at(0, EventKind::DecodeEnd));
        // third request waits for the first wave
        assert_eq!(at(2, EventKind::PrefillStart), at(1, EventKind::DecodeEnd));
        assert_eq!(p.last().unwrap().kind, EventKind::RunEnd);
        assert_eq!(p.iter().filter(|e| e.request.is_some()).count(), 15);
    }

    #[test]
    fn skip_run_end() {
        let p = plan(&DriverOptions {
            skip_run_end: true,
            ..opts()
        });
        assert!(p.iter().all(|e| e.kind != EventKind::RunEnd));
    }

    #[test]
    fn set_rejects_unknown_keys_and_bad_numbers() {
        let mut o = opts();
        o.set("requests", "7").unwrap();
        assert_eq!(o.requests, 7);
        assert!(o.set("requests", "x").is_err());
        assert!(o.set("bogus", "1").is_err());
        o.set("concurrency", "0").unwrap();
        assert_eq!(o.concurrency, 1);
    }

    #[test]
    fn drives_a_live_server() {
        let clock = MonotonicClock::start();
        let server = serve(&Endpoint::loopback(), clock).unwrap();
        let o = DriverOptions {
            endpoint: server.endpoint().clone(),
            requests: 3,
            concurrency: 2,
            prefill_ms: 5,
            decode_ms: 10,
            idle_ms: 5,
            ..opts()
        };
        let summary = drive(&o).unwrap();
        assert!(server.wait_until(Duration::from_secs(5), |ev| ev.len() == summary.events_sent));
        let (events, stats) = server.shutdown();
        assert_eq!(stats.rejected, 0);
        let session = validate_events(&events).unwrap();
        assert_eq!(session.requests.len(), 3);
        assert_eq!(session.phase_source.as_deref(), Some("scripted"));
        let r = &session.requests["req-0000"];
        assert!(r.prefill.duration_ns() >= 5_000_000);
        assert_eq!(r.generated_tokens, Some(1));
    }
}
