//! Power sources and the sampling loop.
//!
//! A [`SourceSpec`] names a source, the hardware domain it measures and the
//! backend that reads it. [`open_source`] probes the backend and returns a
//! [`SourceHandle`]; [`sample_once`] turns one read into a [`PowerSample`].
//! Counter backends report cumulative microjoules, so they need two reads
//! before they can produce a wattage.

mod baseboard;
mod counter;
mod gpu;
mod sampling_loop;
mod synthetic;
pub mod trace;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baseboard::parse_dcmi_power_reading;
pub use counter::{counter_delta_uj, CounterReading};
pub use gpu::milliwatts_to_watts;
pub use sampling_loop::{
    run_sampling_loop, CollectingSink, SampleSink, SamplingLoop, SamplingSummary, SourceStats,
    StopHandle,
};
pub use trace::{record_trace, replay_trace};

/// Default sampling cadence (10 Hz).
pub const DEFAULT_INTERVAL_MS: u64 = 100;

/// Hardware domain a source measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    Gpu,
    Cpu,
    Dram,
    /// Whole-node reading. Never added to component sums.
    Node,
    Other,
}

impl Domain {
    pub fn is_component(self) -> bool {
        !matches!(self, Domain::Node)
    }

    /// Best-effort domain from a source id prefix (`gpu0`, `cpu-pkg`, ...).
    /// Used when replaying a trace without the run record that lists sources.
    pub fn infer_from_id(source_id: &str) -> Domain {
        let id = source_id.to_ascii_lowercase();
        if id.starts_with("gpu") {
            Domain::Gpu
        } else if id.starts_with("cpu") || id.starts_with("package") || id.starts_with("pkg") {
            Domain::Cpu
        } else if id.starts_with("dram") || id.starts_with("mem") {
            Domain::Dram
        } else if id.starts_with("node") {
            Domain::Node
        } else {
            Domain::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Gpu => "GPU",
            Domain::Cpu => "CPU",
            Domain::Dram => "DRAM",
            Domain::Node => "NODE",
            Domain::Other => "OTHER",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    EnergyCounterFile,
    GpuTelemetry,
    BaseboardPoll,
    TraceReplay,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub source_id: String,
    pub domain: Domain,
    pub backend: Backend,
    #[serde(default, alias = "params")]
    pub backend_params: BTreeMap<String, String>,
}

impl SourceSpec {
    pub fn new(source_id: impl Into<String>, domain: Domain, backend: Backend) -> Self {
        Self {
            source_id: source_id.into(),
            domain,
            backend,
            backend_params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<String>) -> Self {
        self.backend_params.insert(key.to_string(), value.into());
        self
    }

    /// Per-source cadence override (`interval_ms` parameter).
    pub fn interval_override_ms(&self) -> Result<Option<u64>, OpenError> {
        match self.backend_params.get("interval_ms") {
            None => Ok(None),
            Some(raw) => match raw.parse::<u64>() {
                Ok(ms) if ms >= 1 => Ok(Some(ms)),
                _ => Err(OpenError::BadParams {
                    source_id: self.source_id.clone(),
                    detail: format!("interval_ms must be an integer >= 1, got {raw:?}"),
                }),
            },
        }
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.backend_params.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, OpenError> {
        self.param(key).ok_or_else(|| OpenError::BadParams {
            source_id: self.source_id.clone(),
            detail: format!("missing parameter `{key}` for {:?} backend", self.backend),
        })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, OpenError> {
        match self.param(key) {
            None => Ok(None),
            Some(raw) => raw.trim().parse::<T>().map(Some).map_err(|_| OpenError::BadParams {
                source_id: self.source_id.clone(),
                detail: format!("parameter `{key}` has invalid value {raw:?}"),
            }),
        }
    }
}

/// Source ids end up as a bare CSV column, so they are restricted to a safe set.
pub fn validate_source_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':' | '/'))
}

/// One timestamped wattage reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Nanoseconds since the run epoch.
    pub ts_ns: u64,
    pub source_id: String,
    pub watts: f64,
}

impl PowerSample {
    /// Builds a sample at milliwatt resolution, the resolution of the trace
    /// format, so live and replayed pipelines see identical values.
    pub fn new(ts_ns: u64, source_id: impl Into<String>, watts: f64) -> Self {
        Self {
            ts_ns,
            source_id: source_id.into(),
            watts: quantize_watts(watts),
        }
    }
}

/// Rounds to the nearest milliwatt.
pub fn quantize_watts(watts: f64) -> f64 {
    (watts * 1000.0).round() / 1000.0
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpenError {
    #[error("source {source_id}: sensor unavailable: {detail}")]
    SensorUnavailable { source_id: String, detail: String },
    #[error("source {source_id}: permission denied reading {path}")]
    PermissionDenied { source_id: String, path: String },
    #[error("source {source_id}: bad parameters: {detail}")]
    BadParams { source_id: String, detail: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("source {source_id}: read failed: {detail}")]
    ReadFailed { source_id: String, detail: String },
    #[error("source {source_id}: first counter read has no delta yet")]
    FirstReadNoDelta { source_id: String },
    #[error("source {source_id}: trace exhausted")]
    Exhausted { source_id: String },
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampling interval must be at least 1 ms")]
    BadInterval,
    #[error("no power sources to sample")]
    NoSources,
    #[error("every power source failed on the same tick")]
    AllSourcesFailed { summary: SamplingSummary },
    #[error("trace {path}: line {line}: {detail}")]
    TraceFormat {
        path: String,
        line: u64,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A backend's reading logic. Each handle is driven by exactly one actor.
trait Reader: Send {
    /// Returns watts at `ts_ns`, or a full sample for backends that carry
    /// their own timestamps (trace replay).
    fn read(&mut self, ts_ns: u64) -> Result<Reading, ReadError>;
}

enum Reading {
    Watts(f64),
    Sample { ts_ns: u64, watts: f64 },
}

enum ReadError {
    Failed(String),
    NoDelta,
    Exhausted,
}

/// An opened power source.
pub struct SourceHandle {
    spec: SourceSpec,
    interval_override_ms: Option<u64>,
    reader: Box<dyn Reader>,
}

impl fmt::Debug for SourceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SourceHandle")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

impl SourceHandle {
    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn source_id(&self) -> &str {
        &self.spec.source_id
    }

    pub fn interval_override_ms(&self) -> Option<u64> {
        self.interval_override_ms
    }
}

/// Opens and probes a source. A missing sensor fails here rather than mid-run.
pub fn open_source(spec: &SourceSpec) -> Result<SourceHandle, OpenError> {
    if !validate_source_id(&spec.source_id) {
        return Err(OpenError::BadParams {
            source_id: spec.source_id.clone(),
            detail: "source_id must be non-empty and use [A-Za-z0-9_.:/-]".into(),
        });
    }
    let interval_override_ms = spec.interval_override_ms()?;
    let reader: Box<dyn Reader> = match spec.backend {
        Backend::EnergyCounterFile => Box::new(counter::CounterFileReader::open(spec)?),
        Backend::GpuTelemetry => Box::new(gpu::GpuReader::open(spec)?),
        Backend::BaseboardPoll => Box::new(baseboard::BaseboardReader::open(spec)?),
        Backend::TraceReplay => Box::new(trace::TraceReader::open(spec)?),
        Backend::Synthetic => Box::new(synthetic::SyntheticReader::open(spec)?),
    };
    Ok(SourceHandle {
        spec: spec.clone(),
        interval_override_ms,
        reader,
    })
}

/// Reads one sample from `handle`, tagged with `ts_ns`.
///
/// Trace-replay handles return the next recorded sample with its recorded
/// timestamp instead.
pub fn sample_once(handle: &mut SourceHandle, ts_ns: u64) -> Result<PowerSample, SampleError> {
    let source_id = &handle.spec.source_id;
    match handle.reader.read(ts_ns) {
        Ok(Reading::Watts(w)) => finish(source_id, ts_ns, w),
        Ok(Reading::Sample { ts_ns, watts }) => finish(source_id, ts_ns, watts),
        Err(ReadError::Failed(detail)) => Err(SampleError::ReadFailed {
            source_id: source_id.clone(),
            detail,
        }),
        Err(ReadError::NoDelta) => Err(SampleError::FirstReadNoDelta {
            source_id: source_id.clone(),
        }),
        Err(ReadError::Exhausted) => Err(SampleError::Exhausted {
            source_id: source_id.clone(),
        }),
    }
}

fn finish(source_id: &str, ts_ns: u64, watts: f64) -> Result<PowerSample, SampleError> {
    if !watts.is_finite() || watts < 0.0 {
        return Err(SampleError::ReadFailed {
            source_id: source_id.to_string(),
            detail: format!("invalid wattage {watts}"),
        });
    }
    Ok(PowerSample::new(ts_ns, source_id, watts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_constant_source_reads_100w() {
        let spec = SourceSpec::new("gpu0", Domain::Gpu, Backend::Synthetic)
            .with_param("wave", "constant")
            .with_param("watts", "100");
        let mut h = open_source(&spec).unwrap();
        for ts in [0, 1, 5_000_000_000, u64::MAX / 2] {
            let s = sample_once(&mut h, ts).unwrap();
            assert_eq!(s.watts, 100.0);
            assert_eq!(s.ts_ns, ts);
            assert_eq!(s.source_id, "gpu0");
        }
    }

    #[test]
    fn missing_counter_file_is_sensor_unavailable() {
        let spec = SourceSpec::new("cpu0", Domain::Cpu, Backend::EnergyCounterFile)
            .with_param("path", "/nonexistent/powercap/energy_uj");
        assert!(matches!(
            open_source(&spec),
            Err(OpenError::SensorUnavailable { .. })
        ));
    }

    #[test]
    fn missing_required_param_is_bad_params() {
        let spec = SourceSpec::new("cpu0", Domain::Cpu, Backend::EnergyCounterFile);
        assert!(matches!(open_source(&spec), Err(OpenError::BadParams { .. })));
        let spec = SourceSpec::new("t", Domain::Gpu, Backend::TraceReplay);
        assert!(matches!(open_source(&spec), Err(OpenError::BadParams { .. })));
    }

    #[test]
    fn rejects_unsafe_source_ids() {
        let spec = SourceSpec::new("gpu,0", Domain::Gpu, Backend::Synthetic);
        assert!(matches!(open_source(&spec), Err(OpenError::BadParams { .. })));
    }

    #[test]
    fn bad_interval_override() {
        let spec =
            SourceSpec::new("n", Domain::Node, Backend::Synthetic).with_param("interval_ms", "0");
        assert!(matches!(open_source(&spec), Err(OpenError::BadParams { .. })));
        let spec =
            SourceSpec::new("n", Domain::Node, Backend::Synthetic)
            .with_param("watts", "5")
            .with_param("interval_ms", "500");
        assert_eq!(open_source(&spec).unwrap().interval_override_ms(), Some(500));
    }

    #[test]
    fn domain_inference() {
        assert_eq!(Domain::infer_from_id("gpu3"), Domain::Gpu);
        assert_eq!(Domain::infer_from_id("cpu-pkg0"), Domain::Cpu);
        assert_eq!(Domain::infer_from_id("dram0"), Domain::Dram);
        assert_eq!(Domain::infer_from_id("node"), Domain::Node);
        assert_eq!(Domain::infer_from_id("fan"), Domain::Other);
    }

    #[test]
    fn quantization_is_milliwatt() {
        assert_eq!(quantize_watts(123.45678), 123.457);
        assert_eq!(PowerSample::new(0, "x", 0.0004).watts, 0.0);
    }
}
