//! Energy attribution: integrates each source's samples over the engine
//! phase timeline and splits phase energy among requests.
//!
//! Integration is trapezoidal over actual sample timestamps, so jitter and
//! gaps need no special handling. Samples straddling a window edge contribute
//! through linear interpolation at the edge.
//!
//! Totals cover component sources only (GPU, CPU, DRAM, OTHER). A NODE source
//! is a whole-node reading and would double count; it is reported on its own
//! and used to estimate unmeasured "other" power as
//! `max(0, node - gpu - cpu - dram)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phase::{Phase, PhaseTimeline};
use crate::sampler::{Domain, PowerSample};

/// Residual above which the phase/component identity is treated as a bug.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

pub const OTHERS_CONVENTION: &str = "node-minus-components-else-other-domain";

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("timeline has no intervals")]
    EmptyTimeline,
    #[error("samples for source {source_id} are not strictly time-ordered")]
    UnorderedSamples { source_id: String },
    #[error("integration window is empty")]
    EmptyWindow,
    #[error("phase totals and component totals disagree (relative residual {residual:e})")]
    IdentityViolation { residual: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseJoules {
    pub prefill_j: f64,
    pub decode_j: f64,
    pub idle_j: f64,
}

impl PhaseJoules {
    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Prefill => self.prefill_j,
            Phase::Decode => self.decode_j,
            Phase::Idle => self.idle_j,
        }
    }

    fn add(&mut self, phase: Phase, joules: f64) {
        match phase {
            Phase::Prefill => self.prefill_j += joules,
            Phase::Decode => self.decode_j += joules,
            Phase::Idle => self.idle_j += joules,
        }
    }

    pub fn total(&self) -> f64 {
        self.prefill_j + self.decode_j + self.idle_j
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub prefill_j: f64,
    pub decode_j: f64,
    pub idle_j: f64,
    pub total_j: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestEnergy {
    pub prefill_j: f64,
    pub decode_j: f64,
}

impl RequestEnergy {
    pub fn total(&self) -> f64 {
        self.prefill_j + self.decode_j
    }
}

/// Component breakdown `E_gpu + E_cpu + E_dram + E_others`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentBreakdown {
    pub gpu_j: f64,
    pub cpu_j: f64,
    pub dram_j: f64,
    pub others_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_j: Option<f64>,
    pub others_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub run_id: String,
    pub by_source_phase: BTreeMap<String, PhaseJoules>,
    pub source_domains: BTreeMap<String, Domain>,
    pub by_domain: BTreeMap<Domain, f64>,
    /// Component sources only.
    pub totals: LedgerTotals,
    /// Sum of component sources integrated over the whole run in one pass;
    /// must agree with `totals.total_j`.
    pub component_sum_j: f64,
    pub identity_residual: f64,
    pub breakdown: ComponentBreakdown,
    /// Complete requests only.
    pub per_request: BTreeMap<String, RequestEnergy>,
    /// Phase energy shared out to requests that never completed.
    pub incomplete_requests_j: f64,
    /// Fraction of the run spanned by each source's samples.
    pub coverage: BTreeMap<String, f64>,
}

/// Trapezoidal integral of one source's samples over `window` (ns), in joules.
pub fn integrate_energy(
    samples: &[PowerSample],
    window: (u64, u64),
) -> Result<f64, AttributionError> {
    if window.0 >= window.1 {
        return Err(AttributionError::EmptyWindow);
    }
    let series = Series::from_samples(samples.iter())?;
    Ok(series.integrate(window.0, window.1))
}

/// One source's samples as parallel arrays.
struct Series {
    ts: Vec<u64>,
    watts: Vec<f64>,
}

impl Series {
    fn from_samples<'a>(
        samples: impl Iterator<Item = &'a PowerSample>,
    ) -> Result<Self, AttributionError> {
        let mut ts: Vec<u64> = Vec::new();
        let mut watts = Vec::new();
        for s in samples {
            if ts.last().is_some_and(|&prev| s.ts_ns <= prev) {
                return Err(AttributionError::UnorderedSamples {
                    source_id: s.source_id.clone(),
                });
            }
            ts.push(s.ts_ns);
            watts.push(s.watts);
        }
        Ok(Self { ts, watts })
    }

    fn at(&self, i: usize, t: u64) -> f64 {
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let (w0, w1) = (self.watts[i], self.watts[i + 1]);
        if t == t0 {
            return w0;
        }
        if t == t1 {
            return w1;
        }
        w0 + (w1 - w0) * ((t - t0) as f64 / (t1 - t0) as f64)
    }

    fn integrate(&self, a: u64, b: u64) -> f64 {
        if self.ts.len() < 2 || a >= b {
            return 0.0;
        }
        // First pair whose right end is past `a`.
        let mut i = self.ts.partition_point(|&t| t <= a).saturating_sub(1);
        let mut joules = 0.0;
        while i + 1 < self.ts.len() && self.ts[i] < b {
            let lo = self.ts[i].max(a);
            let hi = self.ts[i + 1].min(b);
            if hi > lo {
                let mean_w = 0.5 * (self.at(i, lo) + self.at(i, hi));
                joules += mean_w * ((hi - lo) as f64 / 1e9);
            }
            i += 1;
        }
        joules
    }

    fn span(&self) -> Option<(u64, u64)> {
        Some((*self.ts.first()?, *self.ts.last()?))
    }
}

struct SourceSeries {
    id: String,
    domain: Domain,
    series: Series,
}

fn group_sources(
    samples: &[PowerSample],
    domains: &BTreeMap<String, Domain>,
) -> Result<Vec<SourceSeries>, AttributionError> {
    let mut grouped: BTreeMap<&str, Vec<&PowerSample>> = BTreeMap::new();
    for s in samples {
        grouped.entry(s.source_id.as_str()).or_default().push(s);
    }
    grouped
        .into_iter()
        .map(|(id, list)| {
            Ok(SourceSeries {
                id: id.to_string(),
                domain: domains
                    .get(id)
                    .copied()
                    .unwrap_or_else(|| Domain::infer_from_id(id)),
                series: Series::from_samples(list.into_iter())?,
            })
        })
        .collect()
}

/// Builds the energy ledger for one run.
///
/// `domains` maps source ids to domains; ids missing from it are classified
/// by [`Domain::infer_from_id`].
pub fn attribute(
    samples: &[PowerSample],
    domains: &BTreeMap<String, Domain>,
    timeline: &PhaseTimeline,
) -> Result<EnergyLedger, AttributionError> {
    if timeline.engine_intervals.is_empty() || timeline.run_duration_ns() == 0 {
        return Err(AttributionError::EmptyTimeline);
    }
    let sources = group_sources(samples, domains)?;
    let run = timeline.run_interval;

    let mut by_source_phase = BTreeMap::new();
    let mut source_domains = BTreeMap::new();
    let mut by_domain: BTreeMap<Domain, f64> = BTreeMap::new();
    let mut coverage = BTreeMap::new();
    let mut phase_totals = PhaseJoules::default();
    let mut component_sum_j = 0.0;

    for src in &sources {
        let mut cells = PhaseJoules::default();
        for iv in &timeline.engine_intervals {
            cells.add(iv.phase, src.series.integrate(iv.start_ns, iv.end_ns));
        }
        *by_domain.entry(src.domain).or_default() += cells.total();
        if src.domain.is_component() {
            for phase in Phase::ALL {
                phase_totals.add(phase, cells.get(phase));
            }
            component_sum_j += src.series.integrate(run.start_ns, run.end_ns);
        }
        let covered = src.series.span().map_or(0, |(first, last)| {
            last.min(run.end_ns).saturating_sub(first.max(run.start_ns))
        });
        coverage.insert(src.id.clone(), covered as f64 / run.duration_ns() as f64);
        by_source_phase.insert(src.id.clone(), cells);
        source_domains.insert(src.id.clone(), src.domain);
    }

    let totals = LedgerTotals {
        prefill_j: phase_totals.prefill_j,
        decode_j: phase_totals.decode_j,
        idle_j: phase_totals.idle_j,
        total_j: phase_totals.total(),
    };
    let identity_residual = relative_diff(component_sum_j, totals.total_j);
    if identity_residual > IDENTITY_TOLERANCE {
        return Err(AttributionError::IdentityViolation {
            residual: identity_residual,
        });
    }

    let domain_j = |d: Domain| by_domain.get(&d).copied().unwrap_or(0.0);
    let node_j = by_domain.get(&Domain::Node).copied();
    let (gpu_j, cpu_j, dram_j) = (domain_j(Domain::Gpu), domain_j(Domain::Cpu), domain_j(Domain::Dram));
    let others_j = match node_j {
        Some(node) => (node - gpu_j - cpu_j - dram_j).max(0.0),
        None => domain_j(Domain::Other),
    };
    let breakdown = ComponentBreakdown {
        gpu_j,
        cpu_j,
        dram_j,
        others_j,
        node_j,
        others_convention: OTHERS_CONVENTION.to_string(),
    };

    let shares = split_by_request(&sources, timeline);

    Ok(EnergyLedger {
        run_id: timeline.run_id.clone(),
        by_source_phase,
        source_domains,
        by_domain,
        totals,
        component_sum_j,
        identity_residual,
        breakdown,
        per_request: shares.per_request,
        incomplete_requests_j: shares.incomplete_j,
        coverage,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RequestShares {
    pub per_request: BTreeMap<String, RequestEnergy>,
    pub incomplete_j: f64,
}

/// Splits phase energy among requests: prefill energy in proportion to the
/// prompt tokens of the requests prefilling at that moment, decode energy
/// equally among the requests decoding at that moment.
pub fn per_request_energy(
    samples: &[PowerSample],
    domains: &BTreeMap<String, Domain>,
    timeline: &PhaseTimeline,
) -> Result<RequestShares, AttributionError> {
    let sources = group_sources(samples, domains)?;
    Ok(split_by_request(&sources, timeline))
}

fn split_by_request(sources: &[SourceSeries], timeline: &PhaseTimeline) -> RequestShares {
    let mut shares = RequestShares::default();
    for (id, _) in timeline.complete_requests() {
        shares.per_request.insert(id.clone(), RequestEnergy::default());
    }
    for seg in timeline.segments() {
        if seg.phase == Phase::Idle || seg.end_ns == seg.start_ns {
            continue;
        }
        let joules: f64 = sources
            .iter()
            .filter(|s| s.domain.is_component())
            .map(|s| s.series.integrate(seg.start_ns, seg.end_ns))
            .sum();
        let parts: Vec<(&str, f64)> = match seg.phase {
            Phase::Prefill => {
                let weights: Vec<(&str, f64)> = seg
                    .prefilling
                    .iter()
                    .map(|id| (*id, timeline.requests[*id].prompt_tokens as f64))
                    .collect();
                let sum: f64 = weights.iter().map(|(_, w)| w).sum();
                weights.into_iter().map(|(id, w)| (id, joules * w / sum)).collect()
            }
            Phase::Decode => {
                let n = seg.decoding.len() as f64;
                seg.decoding.iter().map(|id| (*id, joules / n)).collect()
            }
            Phase::Idle => unreachable!(),
        };
        for (id, j) in parts {
            match shares.per_request.get_mut(id) {
                Some(e) if seg.phase == Phase::Prefill => e.prefill_j += j,
                Some(e) => e.decode_j += j,
                None => shares.incomplete_j += j,
            }
        }
    }
    shares
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
