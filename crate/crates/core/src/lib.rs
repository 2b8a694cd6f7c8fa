//! Phase-aligned energy measurement for LLM inference runs.
//!
//! The crate is split along the measurement pipeline:
//!
//! - [`sampler`] reads timestamped wattage from power sources (energy counter
//!   files, GPU telemetry, baseboard queries, recorded traces, synthetic waves).
//! - [`phase`] ingests request lifecycle events over a line protocol and
//!   resolves them into an engine-level prefill/decode/idle timeline.
//! - [`attribution`] integrates samples over that timeline into an
//!   [`EnergyLedger`](attribution::EnergyLedger).
//! - [`metrics`] derives normalized figures (joules per token, EDP, cost, ...).
//! - [`report`] serializes ledgers, metrics and sweep tables.
//! - [`orchestrator`] parses run/sweep configs and drives live runs.
//! - [`synth`] generates scenarios with known energies plus a brute-force
//!   reference ledger.

pub mod analysis;
pub mod attribution;
pub mod clock;
pub mod metrics;
pub mod orchestrator;
pub mod phase;
pub mod report;
pub mod sampler;
pub mod synth;

pub use analysis::{analyze, Analysis, AnalysisError, RunRecord};
pub use attribution::{attribute, integrate_energy, EnergyLedger};
pub use clock::MonotonicClock;
pub use metrics::{compute_metrics, MetricsReport};
pub use phase::{EventKind, Phase, PhaseEvent, PhaseTimeline};
pub use sampler::{Domain, PowerSample, SourceSpec};

/// Harness version recorded in report provenance.
pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");
