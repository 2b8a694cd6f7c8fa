//! Concurrent sampling loop: one actor thread per source, each on its own
//! cadence, all stamping from one shared [`MonotonicClock`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{sample_once, PowerSample, SampleError, SamplerError, SourceHandle};
use crate::clock::MonotonicClock;

/// Receives samples from every actor concurrently.
pub trait SampleSink: Send + Sync {
    fn accept(&self, sample: PowerSample);
}

impl<F> SampleSink for F
where
    F: Fn(PowerSample) + Send + Sync,
{
    fn accept(&self, sample: PowerSample) {
        self(sample)
    }
}

#[derive(Debug, Default)]
pub struct CollectingSink {
    samples: Mutex<Vec<PowerSample>>,
}

impl CollectingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples with `ts_ns >= ts` for `source_id`.
    pub fn count_at_or_after(&self, source_id: &str, ts: u64) -> usize {
        self.samples
            .lock()
            .unwrap()
            .iter()
            .filter(|s| s.source_id == source_id && s.ts_ns >= ts)
            .count()
    }

    pub fn take(&self) -> Vec<PowerSample> {
        std::mem::take(&mut *self.samples.lock().unwrap())
    }
}

impl SampleSink for CollectingSink {
    fn accept(&self, sample: PowerSample) {
        self.samples.lock().unwrap().push(sample);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub samples: u64,
    pub dropped: u64,
    /// Largest deviation of an inter-read gap from the nominal interval.
    pub max_jitter_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub per_source: BTreeMap<String, SourceStats>,
}

impl SamplingSummary {
    pub fn dropped(&self) -> u64 {
        self.per_source.values().map(|s| s.dropped).sum()
    }

    pub fn max_jitter_ns(&self) -> u64 {
        self.per_source
            .values()
            .map(|s| s.max_jitter_ns)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn new() -> Self {
        Self(Arc::new(AtomicBool::new(false)))
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

impl Default for StopHandle {
    fn default() -> Self {
        Self::new()
    }
}

struct Shared {
    stop: StopHandle,
    /// Per-actor flag: the most recent read attempt failed.
    failing: Vec<AtomicBool>,
    finished: Vec<AtomicBool>,
    running: AtomicUsize,
    aborted: AtomicBool,
}

impl Shared {
    fn check_all_failed(&self) {
        let mut any_live = false;
        for (failing, finished) in self.failing.iter().zip(&self.finished) {
            if finished.load(Ordering::SeqCst) {
                continue;
            }
            any_live = true;
            if !failing.load(Ordering::SeqCst) {
                return;
            }
        }
        if any_live {
            self.aborted.store(true, Ordering::SeqCst);
            self.stop.stop();
        }
    }
}

pub struct SamplingLoop {
    shared: Arc<Shared>,
    actors: Vec<(String, JoinHandle<SourceStats>)>,
}

impl SamplingLoop {
    /// Spawns one actor per handle. Handles with an `interval_ms` override keep
    /// their own cadence; the rest use `interval_ms`.
    pub fn start(
        handles: Vec<SourceHandle>,
        interval_ms: u64,
        sink: Arc<dyn SampleSink>,
        clock: MonotonicClock,
    ) -> Result<Self, SamplerError> {
        Self::start_with_stop(handles, interval_ms, sink, clock, StopHandle::new())
    }

    fn start_with_stop(
        handles: Vec<SourceHandle>,
        interval_ms: u64,
        sink: Arc<dyn SampleSink>,
        clock: MonotonicClock,
        stop: StopHandle,
    ) -> Result<Self, SamplerError> {
        if interval_ms == 0 {
            return Err(SamplerError::BadInterval);
        }
        if handles.is_empty() {
            return Err(SamplerError::NoSources);
        }
        let n = handles.len();
        let shared = Arc::new(Shared {
            stop,
            failing: (0..n).map(|_| AtomicBool::new(false)).collect(),
            finished: (0..n).map(|_| AtomicBool::new(false)).collect(),
            running: AtomicUsize::new(n),
            aborted: AtomicBool::new(false),
        });
        let actors = handles
            .into_iter()
            .enumerate()
            .map(|(idx, handle)| {
                let interval_ns = handle.interval_override_ms().unwrap_or(interval_ms) * 1_000_000;
                let id = handle.source_id().to_string();
                let shared = Arc::clone(&shared);
                let sink = Arc::clone(&sink);
                let join = thread::Builder::new()
                    .name(format!("sampler-{id}"))
                    .spawn(move || actor(idx, handle, interval_ns, sink, clock, shared))
                    .expect("spawning sampler thread");
                (id, join)
            })
            .collect();
        Ok(Self { shared, actors })
    }

    pub fn stop_handle(&self) -> StopHandle {
        self.shared.stop.clone()
    }

    /// True once every actor has ended (stopped, exhausted or aborted).
    pub fn is_finished(&self) -> bool {
        self.shared.running.load(Ordering::SeqCst) == 0
    }

    /// Waits for every actor to end on its own (or via the stop handle).
    pub fn wait(self) -> Result<SamplingSummary, SamplerError> {
        let mut summary = SamplingSummary::default();
        for (id, join) in self.actors {
            let stats = join.join().expect("sampler thread panicked");
            summary.per_source.insert(id, stats);
        }
        if self.shared.aborted.load(Ordering::SeqCst) {
            return Err(SamplerError::AllSourcesFailed { summary });
        }
        Ok(summary)
    }

    pub fn stop(self) -> Result<SamplingSummary, SamplerError> {
        self.shared.stop.stop();
        self.wait()
    }
}

/// Blocking form: samples until `stop` fires, every source is exhausted, or
/// all sources fail on the same tick.
pub fn run_sampling_loop(
    handles: Vec<SourceHandle>,
    interval_ms: u64,
    sink: Arc<dyn SampleSink>,
    clock: MonotonicClock,
    stop: StopHandle,
) -> Result<SamplingSummary, SamplerError> {
    SamplingLoop::start_with_stop(handles, interval_ms, sink, clock, stop)?.wait()
}

fn actor(
    idx: usize,
    mut handle: SourceHandle,
    interval_ns: u64,
    sink: Arc<dyn SampleSink>,
    clock: MonotonicClock,
    shared: Arc<Shared>,
) -> SourceStats {
    let mut stats = SourceStats::default();
    let start = clock.now_ns();
    let mut tick: u64 = 0;
    let mut last_read_ns: Option<u64> = None;
    let mut last_emitted_ts: Option<u64> = None;

    loop {
        let deadline = start + tick * interval_ns;
        if !sleep_until(&clock, deadline, &shared.stop) {
            break;
        }
        let mut now = clock.now_ns();
        // Strictly increasing per-source timestamps, even on coarse clocks.
        if let Some(prev) = last_emitted_ts {
            now = now.max(prev + 1);
        }
        if let Some(prev) = last_read_ns {
            let gap = now - prev;
            stats.max_jitter_ns = stats.max_jitter_ns.max(gap.abs_diff(interval_ns));
        }
        last_read_ns = Some(now);

        match sample_once(&mut handle, now) {
            Ok(sample) => {
                shared.failing[idx].store(false, Ordering::SeqCst);
                if last_emitted_ts.is_some_and(|prev| sample.ts_ns <= prev) {
                    // Out-of-order replay data: drop rather than break the stream.
                    stats.dropped += 1;
                } else {
                    last_emitted_ts = Some(sample.ts_ns);
                    stats.samples += 1;
                    sink.accept(sample);
                }
            }
            Err(SampleError::FirstReadNoDelta { .. }) => {
                shared.failing[idx].store(false, Ordering::SeqCst);
            }
            Err(SampleError::Exhausted { .. }) => break,
            Err(SampleError::ReadFailed { source_id, detail }) => {
                log::debug!("sampler {source_id}: {detail}");
                stats.dropped += 1;
                shared.failing[idx].store(true, Ordering::SeqCst);
                shared.check_all_failed();
            }
        }

        // Skip ticks we are already late for instead of bursting.
        let elapsed = clock.now_ns().saturating_sub(start);
        tick = (tick + 1).max(elapsed / interval_ns + 1);
    }

    shared.finished[idx].store(true, Ordering::SeqCst);
    shared.running.fetch_sub(1, Ordering::SeqCst);
    stats
}

/// Sleeps in short slices so a stop request is honoured promptly. Returns
/// false if stopped.
fn sleep_until(clock: &MonotonicClock, deadline_ns: u64, stop: &StopHandle) -> bool {
    const SLICE_NS: u64 = 5_000_000;
    loop {
        if stop.is_stopped() {
            return false;
        }
        let now = clock.now_ns();
        if now >= deadline_ns {
            return true;
        }
        thread::sleep(Duration::from_nanos((deadline_ns - now).min(SLICE_NS)));
    }
}

#[cfg(test)]
mod tests {
    use super::super::trace::record_trace;
    use super::super::{open_source, Backend, Domain, SourceSpec};
    use super::*;

    fn synthetic(id: &str, watts: &str) -> SourceHandle {
        open_source(
            &SourceSpec::new(id, Domain::Gpu, Backend::Synthetic).with_param("watts", watts),
        )
        .unwrap()
    }

    fn per_source(samples: &[PowerSample], id: &str) -> Vec<PowerSample> {
        samples.iter().filter(|s| s.source_id == id).cloned().collect()
    }

    #[test]
    fn two_synthetic_sources_at_10hz() {
        let sink = Arc::new(CollectingSink::new());
        let lp = SamplingLoop::start(
            vec![synthetic("gpu0", "300"), synthetic("gpu1", "250")],
            100,
            sink.clone(),
            MonotonicClock::start(),
        )
        .unwrap();
        thread::sleep(Duration::from_millis(1000));
        let summary = lp.stop().unwrap();
        let samples = sink.take();
        for id in ["gpu0", "gpu1"] {
            let s = per_source(&samples, id);
            assert!(s.len() >= 9, "{id}: {} samples", s.len());
            assert!(s.windows(2).all(|w| w[0].ts_ns < w[1].ts_ns));
            assert_eq!(summary.per_source[id].samples as usize, s.len());
        }
        assert_eq!(summary.dropped(), 0);
        assert!(summary.per_source.contains_key("gpu0"));
    }

    #[test]
    fn failing_source_degrades_without_stopping() {
        let dir = tempfile::tempdir().unwrap();
        let mw = dir.path().join("mw");
        std::fs::write(&mw, "1000").unwrap();
        let flaky = open_source(
            &SourceSpec::new("gpu9", Domain::Gpu, Backend::GpuTelemetry)
                .with_param("milliwatts_file", mw.display().to_string()),
        )
        .unwrap();
        std::fs::remove_file(&mw).unwrap();

        let sink = Arc::new(CollectingSink::new());
        let lp = SamplingLoop::start(
            vec![synthetic("gpu0", "100"), flaky],
            10,
            sink.clone(),
            MonotonicClock::start(),
        )
        .unwrap();
        thread::sleep(Duration::from_millis(200));
        let summary = lp.stop().unwrap();
        assert!(summary.per_source["gpu9"].dropped > 0);
        assert_eq!(summary.per_source["gpu9"].samples, 0);
        assert!(summary.per_source["gpu0"].samples > 5);
    }

    #[test]
    fn all_sources_failing_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let mw = dir.path().join("mw");
        std::fs::write(&mw, "1000").unwrap();
        let spec = SourceSpec::new("gpu0", Domain::Gpu, Backend::GpuTelemetry)
            .with_param("milliwatts_file", mw.display().to_string());
        let h = open_source(&spec).unwrap();
        std::fs::remove_file(&mw).unwrap();
        let err = run_sampling_loop(
            vec![h],
            5,
            Arc::new(CollectingSink::new()),
            MonotonicClock::start(),
            StopHandle::new(),
        )
        .unwrap_err();
        assert!(matches!(err, SamplerError::AllSourcesFailed { .. }));
    }

    #[test]
    fn trace_replay_delivers_every_sample_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let recorded: Vec<_> = (0..10u64)
            .map(|i| PowerSample::new(i * 7_000_000 + 3, "gpu0", 100.0 + i as f64))
            .collect();
        record_trace(&recorded, &path).unwrap();

        // Independent parse of the file, not via read_trace.
        let text = std::fs::read_to_string(&path).unwrap();
        let expected: Vec<(u64, String, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                (cols[0].parse().unwrap(), cols[1].to_string(), cols[2].parse().unwrap())
            })
            .collect();

        let h = open_source(
            &SourceSpec::new("gpu0", Domain::Gpu, Backend::TraceReplay)
                .with_param("path", path.display().to_string()),
        )
        .unwrap();
        let sink = Arc::new(CollectingSink::new());
        let summary = run_sampling_loop(
            vec![h],
            1,
            sink.clone(),
            MonotonicClock::start(),
            StopHandle::new(),
        )
        .unwrap();
        let got: Vec<(u64, String, f64)> = sink
            .take()
            .into_iter()
            .map(|s| (s.ts_ns, s.source_id, s.watts))
            .collect();
        assert_eq!(got, expected);
        assert_eq!(summary.per_source["gpu0"].samples, 10);
    }

    #[test]
    fn rejects_zero_interval_and_empty_handles() {
        let sink: Arc<dyn SampleSink> = Arc::new(CollectingSink::new());
        assert!(matches!(
            SamplingLoop::start(vec![synthetic("a", "1")], 0, sink.clone(), MonotonicClock::start()),
            Err(SamplerError::BadInterval)
        ));
        assert!(matches!(
            SamplingLoop::start(vec![], 10, sink, MonotonicClock::start()),
            Err(SamplerError::NoSources)
        ));
    }

    #[test]
    fn closure_sinks_work() {
        let count = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&count);
        let sink: Arc<dyn SampleSink> = Arc::new(move |_s: PowerSample| {
            c.fetch_add(1, Ordering::SeqCst);
        });
        let lp = SamplingLoop::start(vec![synthetic("a", "1")], 5, sink, MonotonicClock::start())
            .unwrap();
        thread::sleep(Duration::from_millis(50));
        lp.stop().unwrap();
        assert!(count.load(Ordering::SeqCst) > 3);
    }
}
