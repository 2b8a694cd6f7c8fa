//! Synthetic scenarios with analytically known energies.
//!
//! A scenario is a scripted event session plus a power trace in which every
//! source draws a constant wattage per engine phase. Request boundaries sit on
//! whole milliseconds. The trace holds regular samples plus a sample pair
//! `(b - 1 ns, b)` at each engine phase boundary `b`, so the sampled signal
//! steps within one nanosecond and the expected ledger is a plain
//! watts-times-duration sum.

pub mod driver;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::{oracle_ledger, ReferenceLedger};

use crate::analysis::{RunRecord, EVENTS_FILE, RUN_FILE, TRACE_FILE};
use crate::attribution::PhaseJoules;
use crate::metrics::RunMetadata;
use crate::phase::{write_events_ndjson, EventKind, Phase, PhaseEvent};
use crate::sampler::trace::record_trace;
use crate::sampler::{quantize_watts, Backend, Domain, PowerSample, SourceSpec};

const MS: u64 = 1_000_000;

pub const EXPECTED_FILE: &str = "expected.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scenario: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot write trace: {0}")]
    Trace(#[from] crate::sampler::SamplerError),
    #[error("cannot read scenario {path}: {detail}")]
    Spec { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapPattern {
    /// One request at a time, separated by idle gaps.
    Sequential,
    /// Each request starts halfway through its predecessor's decode.
    Staircase,
    /// Uniformly random start times.
    Random,
}

/// Per-phase wattage of one synthetic source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceProfile {
    pub source_id: String,
    pub domain: Domain,
    pub prefill_w: f64,
    pub decode_w: f64,
    pub idle_w: f64,
}

impl SourceProfile {
    pub fn new(source_id: &str, domain: Domain, prefill_w: f64, decode_w: f64, idle_w: f64) -> Self {
        Self {
            source_id: source_id.to_string(),
            domain,
            prefill_w,
            decode_w,
            idle_w,
        }
    }

    pub fn watts(&self, phase: Phase) -> f64 {
        quantize_watts(match phase {
            Phase::Prefill => self.prefill_w,
            Phase::Decode => self.decode_w,
            Phase::Idle => self.idle_w,
        })
    }
}

/// Inclusive integer range drawn uniformly.
pub type Range = [u64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub seed: u64,
    pub n_requests: usize,
    pub overlap_pattern: OverlapPattern,
    pub prefill_ms: Range,
    pub decode_ms: Range,
    #[serde(default = "default_prompt_tokens")]
    pub prompt_tokens: Range,
    #[serde(default = "default_generated_tokens")]
    pub generated_tokens: Range,
    pub run_duration_s: f64,
    pub sample_interval_ms: u64,
    pub sources: Vec<SourceProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<String>,
}

fn default_run_id() -> String {
    "synthetic".into()
}

fn default_prompt_tokens() -> Range {
    [16, 512]
}

fn default_generated_tokens() -> Range {
    [8, 256]
}

impl ScenarioSpec {
    /// One GPU source at 300/220/60 W (prefill/decode/idle).
    pub fn single_gpu(seed: u64, n_requests: usize, pattern: OverlapPattern) -> Self {
        Self {
            run_id: default_run_id(),
            seed,
            n_requests,
            overlap_pattern: pattern,
            prefill_ms: [50, 300],
            decode_ms: [200, 900],
            prompt_tokens: default_prompt_tokens(),
            generated_tokens: default_generated_tokens(),
            run_duration_s: 10.0,
            sample_interval_ms: 100,
            sources: vec![SourceProfile::new("gpu0", Domain::Gpu, 300.0, 220.0, 60.0)],
            model_name: None,
            quantization: None,
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, SynthError> {
        let spec_err = |detail: String| SynthError::Spec {
            path: path.display().to_string(),
            detail,
        };
        let text = fs::read_to_string(path).map_err(|e| spec_err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| spec_err(e.to_string()))
    }

    fn run_ns(&self) -> u64 {
        (self.run_duration_s * 1000.0).round() as u64 * MS
    }

    fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InfeasibleSpec(m.to_string()));
        if !self.run_duration_s.is_finite() || self.run_duration_s <= 0.0 {
            return bad("run_duration_s must be positive");
        }
        if self.sample_interval_ms == 0 {
            return bad("sample_interval_ms must be positive");
        }
        if self.sources.is_empty() {
            return bad("at least one source profile is required");
        }
        for (name, r) in [
            ("prefill_ms", self.prefill_ms),
            ("decode_ms", self.decode_ms),
            ("prompt_tokens", self.prompt_tokens),
            ("generated_tokens", self.generated_tokens),
        ] {
            if r[0] > r[1] {
                return Err(SynthError::InfeasibleSpec(format!("{name} range is reversed")));
            }
        }
        if self.prompt_tokens[0] == 0 {
            return bad("prompt_tokens must be at least 1");
        }
        let mut ids = BTreeSet::new();
        for s in &self.sources {
            if !ids.insert(&s.source_id) {
                return Err(SynthError::InfeasibleSpec(format!(
                    "duplicate source_id {}",
                    s.source_id
                )));
            }
        }
        Ok(())
    }
}

/// One scripted request, in nanoseconds from run start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedRequest {
    pub request_id: String,
    pub prefill: (u64, u64),
    pub decode: (u64, u64),
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
}

/// Energies implied by the scenario's piecewise-constant power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLedger {
    pub run_id: String,
    pub by_source_phase: BTreeMap<String, PhaseJoules>,
    /// Component sources only.
    pub totals: PhaseJoules,
    pub phase_duration_ns: BTreeMap<Phase, u64>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub requests: Vec<ScriptedRequest>,
    pub events: Vec<PhaseEvent>,
    pub trace: Vec<PowerSample>,
    pub expected: ExpectedLedger,
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> u64 {
    rng.random_range(r[0]..=r[1])
}

fn schedule(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Vec<ScriptedRequest>, SynthError> {
    let run_ms = spec.run_ns() / MS;
    let mut requests = Vec::with_capacity(spec.n_requests);
    let mut cursor_ms = 0u64;
    let mut prev: Option<(u64, u64, u64)> = None; // start, prefill, decode
    for i in 0..spec.n_requests {
        let p = draw(rng, spec.prefill_ms);
        let d = draw(rng, spec.decode_ms);
        let (start, queue) = match spec.overlap_pattern {
            OverlapPattern::Sequential => {
                let gap = rng.random_range(0..=spec.prefill_ms[1].max(10));
                (cursor_ms + gap, 0)
            }
            OverlapPattern::Staircase => match prev {
                None => (rng.random_range(0..=spec.prefill_ms[1].max(10)), 0),
                Some((s, pp, dd)) => (s + pp + dd / 2, 0),
            },
            OverlapPattern::Random => {
                let queue = rng.random_range(0..=5u64);
                let span = p + queue + d;
                if span > run_ms {
                    return Err(SynthError::InfeasibleSpec(format!(
                        "request {i} lasts {span} ms but the run is {run_ms} ms"
                    )));
                }
                (rng.random_range(0..=run_ms - span), queue)
            }
        };
        let end = start + p + queue + d;
        if end > run_ms {
            return Err(SynthError::InfeasibleSpec(format!(
                "requests need {end} ms but the run is {run_ms} ms"
            )));
        }
        requests.push(ScriptedRequest {
            request_id: format!("req-{i:04}"),
            prefill: (start * MS, (start + p) * MS),
            decode: ((start + p + queue) * MS, end * MS),
            prompt_tokens: draw(rng, spec.prompt_tokens),
            generated_tokens: draw(rng, spec.generated_tokens),
        });
        cursor_ms = end;
        prev = Some((start, p, d));
    }
    Ok(requests)
}

fn script_events(run_id: &str, run_ns: u64, requests: &[ScriptedRequest]) -> Vec<PhaseEvent> {
    let mut events = vec![PhaseEvent {
        phase_source: Some("synthetic".into()),
        ..PhaseEvent::run(0, run_id, EventKind::RunStart)
    }];
    for r in requests {
        let id = r.request_id.as_str();
        events.extend([
            PhaseEvent::request(r.prefill.0, run_id, id, EventKind::PrefillStart)
                .with_prompt_tokens(r.prompt_tokens),
            PhaseEvent::request(r.prefill.1, run_id, id, EventKind::PrefillEnd),
            PhaseEvent::request(r.decode.0, run_id, id, EventKind::DecodeStart),
            PhaseEvent::request(r.decode.1, run_id, id, EventKind::DecodeEnd),
            PhaseEvent::request(r.decode.1, run_id, id, EventKind::RequestComplete)
                .with_generated_tokens(r.generated_tokens),
        ]);
    }
    events.push(PhaseEvent::run(run_ns, run_id, EventKind::RunEnd));
    events.sort_by_key(|e| e.ts_ns);
    events
}

/// Engine phases as `(start, end, phase)`, adjacent pieces merged.
fn engine_phases(run_ns: u64, requests: &[ScriptedRequest]) -> Vec<(u64, u64, Phase)> {
    let mut edges: BTreeSet<u64> = BTreeSet::from([0, run_ns]);
    for r in requests {
        edges.extend([r.prefill.0, r.prefill.1, r.decode.0, r.decode.1]);
    }
    let edges: Vec<u64> = edges.into_iter().collect();
    let mut phases: Vec<(u64, u64, Phase)> = Vec::new();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let phase = if requests.iter().any(|r| r.prefill.0 <= a && b <= r.prefill.1) {
            Phase::Prefill
        } else if requests.iter().any(|r| r.decode.0 <= a && b <= r.decode.1) {
            Phase::Decode
        } else {
            Phase::Idle
        };
        match phases.last_mut() {
            Some(last) if last.2 == phase => last.1 = b,
            _ => phases.push((a, b, phase)),
        }
    }
    phases
}

fn synthesize_trace(
    spec: &ScenarioSpec,
    run_ns: u64,
    phases: &[(u64, u64, Phase)],
) -> Vec<PowerSample> {
    let interval = spec.sample_interval_ms * MS;
    let mut instants: BTreeSet<u64> = (0..=run_ns / interval).map(|k| k * interval).collect();
    instants.insert(run_ns);
    for &(start, _, _) in &phases[1..] {
        instants.extend([start - 1, start]);
    }
    let phase_at = |t: u64| {
        let i = phases.partition_point(|&(_, end, _)| end <= t);
        phases.get(i).unwrap_or(&phases[phases.len() - 1]).2
    };
    let mut trace = Vec::with_capacity(instants.len() * spec.sources.len());
    for &t in &instants {
        let phase = phase_at(t);
        for s in &spec.sources {
            trace.push(PowerSample::new(t, &s.source_id, s.watts(phase)));
        }
    }
    trace
}

fn expected_ledger(spec: &ScenarioSpec, phases: &[(u64, u64, Phase)]) -> ExpectedLedger {
    let mut phase_duration_ns: BTreeMap<Phase, u64> = Phase::ALL.iter().map(|p| (*p, 0)).collect();
    for &(a, b, phase) in phases {
        *phase_duration_ns.get_mut(&phase).unwrap() += b - a;
    }
    let mut by_source_phase = BTreeMap::new();
    let mut totals = PhaseJoules::default();
    for s in &spec.sources {
        let joules = |phase: Phase| s.watts(phase) * phase_duration_ns[&phase] as f64 / 1e9;
        let cells = PhaseJoules {
            prefill_j: joules(Phase::Prefill),
            decode_j: joules(Phase::Decode),
            idle_j: joules(Phase::Idle),
        };
        if s.domain.is_component() {
            totals.prefill_j += cells.prefill_j;
            totals.decode_j += cells.decode_j;
            totals.idle_j += cells.idle_j;
        }
        by_source_phase.insert(s.source_id.clone(), cells);
    }
    ExpectedLedger {
        run_id: spec.run_id.clone(),
        by_source_phase,
        totals,
        phase_duration_ns,
    }
}

/// Builds the scenario; the same spec always yields identical output.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let run_ns = spec.run_ns();
    let requests = schedule(spec, &mut rng)?;
    let events = script_events(&spec.run_id, run_ns, &requests);
    let phases = engine_phases(run_ns, &requests);
    let trace = synthesize_trace(spec, run_ns, &phases);
    let expected = expected_ledger(spec, &phases);
    Ok(Scenario {
        spec: spec.clone(),
        requests,
        events,
        trace,
        expected,
    })
}

impl Scenario {
    pub fn domains(&self) -> BTreeMap<String, Domain> {
        self.spec
            .sources
            .iter()
            .map(|s| (s.source_id.clone(), s.domain))
            .collect()
    }

    /// Run record describing the scenario, so replay can classify sources.
    pub fn run_record(&self) -> RunRecord {
        let meta = RunMetadata {
            model_name: self.spec.model_name.clone(),
            quantization: self.spec.quantization.clone(),
            interval_ms: Some(self.spec.sample_interval_ms),
            ..RunMetadata::new(&self.spec.run_id)
        };
        RunRecord {
            sources: self
                .spec
                .sources
                .iter()
                .map(|s| SourceSpec::new(&s.source_id, s.domain, Backend::Synthetic))
                .collect(),
            ..RunRecord::new(meta)
        }
    }

    /// Writes `trace.csv`, `events.ndjson`, `run.json` and `expected.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        record_trace(&self.trace, dir.join(TRACE_FILE))?;
        write_events_ndjson(&self.events, dir.join(EVENTS_FILE))?;
        let record = crate::report::to_json_string(&self.run_record());
        fs::write(dir.join(RUN_FILE), record)?;
        let mut expected = serde_json::to_string_pretty(&self.expected).expect("serializable");
        expected.push('\n');
        fs::write(dir.join(EXPECTED_FILE), expected)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::validate_events;

    #[test]
    fn single_request_closed_form() {
        let spec = ScenarioSpec::single_gpu(1, 1, OverlapPattern::Sequential);
        let req = ScriptedRequest {
            request_id: "a".into(),
            prefill: (0, 1000 * MS),
            decode: (1000 * MS, 3000 * MS),
            prompt_tokens: 1,
            generated_tokens: 1,
        };
        let e = expected_ledger(&spec, &engine_phases(4000 * MS, &[req]));
        let g = e.by_source_phase["gpu0"];
        assert_eq!((g.prefill_j, g.decode_j, g.idle_j), (300.0, 440.0, 60.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ScenarioSpec::single_gpu(7, 5, OverlapPattern::Random);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.expected, b.expected);
        let c = generate(&ScenarioSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn events_validate_for_every_pattern() {
        for pattern in [OverlapPattern::Sequential, OverlapPattern::Staircase, OverlapPattern::Random] {
            for seed in 0..20 {
                let s = generate(&ScenarioSpec::single_gpu(seed, 6, pattern)).unwrap();
                let session = validate_events(&s.events).unwrap();
                assert_eq!(session.requests.len(), 6);
                assert!(session.requests.values().all(|r| r.complete));
            }
        }
    }

    #[test]
    fn staircase_overlaps() {
        let s = generate(&ScenarioSpec::single_gpu(3, 3, OverlapPattern::Staircase)).unwrap();
        for w in s.requests.windows(2) {
            assert!(w[1].prefill.0 < w[0].decode.1);
        }
    }

    #[test]
    fn infeasible_specs() {
        let too_long = ScenarioSpec {
            run_duration_s: 1.0,
            ..ScenarioSpec::single_gpu(1, 10, OverlapPattern::Sequential)
        };
        assert!(matches!(generate(&too_long), Err(SynthError::InfeasibleSpec(_))));
        let reversed = ScenarioSpec {
            prefill_ms: [10, 5],
            ..ScenarioSpec::single_gpu(1, 1, OverlapPattern::Random)
        };
        assert!(matches!(generate(&reversed), Err(SynthError::InfeasibleSpec(_))));
    }

    #[test]
    fn trace_steps_at_phase_boundaries() {
        let s = generate(&ScenarioSpec::single_gpu(2, 2, OverlapPattern::Sequential)).unwrap();
        let b = s.requests[0].prefill.1;
        let at = |t: u64| s.trace.iter().find(|p| p.ts_ns == t).map(|p| p.watts);
        assert_eq!(at(b - 1), Some(300.0));
        assert_eq!(at(b), Some(220.0));
    }

    #[test]
    fn toml_spec_roundtrip() {
        let spec = ScenarioSpec::single_gpu(4, 3, OverlapPattern::Staircase);
        let text = toml::to_string(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        fs::write(&path, text).unwrap();
        assert_eq!(ScenarioSpec::from_toml_file(&path).unwrap(), spec);
    }
}
