//! Normalized metrics derived from a ledger and its timeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{EnergyLedger, OTHERS_CONVENTION};
use crate::phase::{PhaseTimeline, Span};
use crate::sampler::{Domain, PowerSample};

pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ledger is for run {ledger} but timeline is for run {timeline}")]
    MismatchedRun { ledger: String, timeline: String },
    #[error("run duration must be positive")]
    NonPositiveDuration,
    #[error("no GPU-domain sources")]
    NoGpuSources,
    #[error("{name} must be non-negative, got {value}")]
    NegativeRate { name: &'static str, value: f64 },
}

/// Run configuration echoed into reports. Everything except `run_id` is a
/// label; absent labels are omitted from the JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_bucket: Option<[u64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp_degree: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pp_degree: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_usd_per_kwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_co2_per_kwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// The run hit a stop condition and `RunEnd` was synthesized.
    #[serde(default)]
    pub truncated: bool,
}

impl RunMetadata {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            ..Self::default()
        }
    }
}

/// Accounting conventions in force, recorded so reports built under
/// different conventions are never silently compared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub overlap_policy: String,
    pub integration: String,
    pub power_imbalance: String,
    pub others: String,
    pub prefill_split: String,
    pub decode_split: String,
    pub joules_per_token_denominator: String,
    pub prefill_per_token_denominator: String,
    pub edp_duration: String,
}

impl Conventions {
    pub fn current(overlap_policy: &str) -> Self {
        Self {
            overlap_policy: overlap_policy.to_string(),
            integration: "trapezoid".into(),
            power_imbalance: "relative-range".into(),
            others: OTHERS_CONVENTION.into(),
            prefill_split: "prompt-token-proportional".into(),
            decode_split: "equal".into(),
            joules_per_token_denominator: "generated-tokens-of-complete-requests".into(),
            prefill_per_token_denominator: "prompt-tokens-of-all-requests".into(),
            edp_duration: "run-wall-time".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub requests: u64,
    pub complete: u64,
    pub incomplete: u64,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(flatten)]
    pub run: RunMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_source: Option<String>,
    pub conventions: Conventions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub run_duration_s: f64,
    pub total_j: f64,
    pub prefill_j: f64,
    pub decode_j: f64,
    pub idle_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joules_per_generated_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_joules_per_request: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_joules_per_prompt_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joules_per_response: Option<f64>,
    pub mean_power_w: f64,
    pub peak_power_w: f64,
    pub energy_delay_product: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_imbalance: Option<f64>,
    pub throughput_tokens_per_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_ms: Option<f64>,
    pub total_kwh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_usd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub co2_kg: Option<f64>,
    pub counts: Counts,
    pub metadata: Metadata,
}

/// What metrics need from the raw samples beyond the ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplesSummary {
    /// Max of summed component power over sample instants and run bounds.
    pub peak_component_w: f64,
}

impl SamplesSummary {
    /// Evaluates the summed, linearly interpolated component power at every
    /// sample instant inside `run` and at the run bounds. The summed signal is
    /// piecewise linear between those instants, so this is its true maximum.
    pub fn from_samples(
        samples: &[PowerSample],
        domains: &BTreeMap<String, Domain>,
        run: Span,
    ) -> Self {
        let mut by_source: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
        for s in samples {
            let domain = domains
                .get(&s.source_id)
                .copied()
                .unwrap_or_else(|| Domain::infer_from_id(&s.source_id));
            if domain.is_component() {
                by_source.entry(&s.source_id).or_default().push((s.ts_ns, s.watts));
            }
        }
        let mut instants: Vec<u64> = vec![run.start_ns, run.end_ns];
        instants.extend(
            by_source
                .values()
                .flatten()
                .map(|&(t, _)| t)
                .filter(|&t| run.start_ns <= t && t <= run.end_ns),
        );
        instants.sort_unstable();
        instants.dedup();

        let peak = instants
            .iter()
            .map(|&t| by_source.values().filter_map(|pts| interpolate(pts, t)).sum::<f64>())
            .fold(0.0, f64::max);
        Self {
            peak_component_w: peak,
        }
    }
}

/// Linear interpolation inside the sampled span; `None` outside it.
fn interpolate(pts: &[(u64, f64)], t: u64) -> Option<f64> {
    let i = pts.partition_point(|&(ts, _)| ts < t);
    let &(t1, w1) = pts.get(i)?;
    if t1 == t {
        return Some(w1);
    }
    let &(t0, w0) = pts.get(i.checked_sub(1)?)?;
    Some(w0 + (w1 - w0) * ((t - t0) as f64 / (t1 - t0) as f64))
}

pub fn energy_delay_product(total_j: f64, run_duration_s: f64) -> Result<f64, MetricsError> {
    if run_duration_s <= 0.0 || !run_duration_s.is_finite() {
        return Err(MetricsError::NonPositiveDuration);
    }
    Ok(total_j * run_duration_s)
}

/// `(max - min) / mean` of per-device mean power; 0 for identical devices.
pub fn power_imbalance(per_source_mean_power: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    if per_source_mean_power.is_empty() {
        return Err(MetricsError::NoGpuSources);
    }
    let values = per_source_mean_power.values();
    let max = values.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.clone().copied().fold(f64::INFINITY, f64::min);
    let mean = values.sum::<f64>() / per_source_mean_power.len() as f64;
    if max == min {
        return Ok(0.0);
    }
    Ok((max - min) / mean)
}

pub fn to_cost(total_kwh: f64, price_usd_per_kwh: f64) -> Result<f64, MetricsError> {
    rate_product(total_kwh, price_usd_per_kwh, "price_usd_per_kwh")
}

pub fn to_co2(total_kwh: f64, kg_co2_per_kwh: f64) -> Result<f64, MetricsError> {
    rate_product(total_kwh, kg_co2_per_kwh, "kg_co2_per_kwh")
}

fn rate_product(kwh: f64, rate: f64, name: &'static str) -> Result<f64, MetricsError> {
    if rate < 0.0 || rate.is_nan() {
        return Err(MetricsError::NegativeRate { name, value: rate });
    }
    Ok(kwh * rate)
}

fn ratio(num: f64, den: u64) -> Option<f64> {
    (den > 0).then(|| num / den as f64)
}

pub fn compute_metrics(
    ledger: &EnergyLedger,
    timeline: &PhaseTimeline,
    summary: &SamplesSummary,
    meta: &RunMetadata,
) -> Result<MetricsReport, MetricsError> {
    if ledger.run_id != timeline.run_id {
        return Err(MetricsError::MismatchedRun {
            ledger: ledger.run_id.clone(),
            timeline: timeline.run_id.clone(),
        });
    }
    let duration_s = timeline.run_duration_ns() as f64 / 1e9;
    let totals = ledger.totals;
    let energy_delay_product = energy_delay_product(totals.total_j, duration_s)?;

    let complete: Vec<_> = timeline.complete_requests().collect();
    let counts = Counts {
        requests: timeline.requests.len() as u64,
        complete: complete.len() as u64,
        incomplete: timeline.incomplete_requests() as u64,
        prompt_tokens: timeline.requests.values().map(|r| r.prompt_tokens).sum(),
        generated_tokens: complete
            .iter()
            .filter_map(|(_, r)| r.generated_tokens)
            .sum(),
    };

    let gpu_mean_power: BTreeMap<String, f64> = ledger
        .by_source_phase
        .iter()
        .filter(|(id, _)| ledger.source_domains.get(*id) == Some(&Domain::Gpu))
        .map(|(id, cells)| (id.clone(), cells.total() / duration_s))
        .collect();
    let power_imbalance = match power_imbalance(&gpu_mean_power) {
        Ok(v) => Some(v),
        Err(MetricsError::NoGpuSources) => None,
        Err(e) => return Err(e),
    };

    let total_kwh = totals.total_j / JOULES_PER_KWH;
    let cost_usd = meta.price_usd_per_kwh.map(|p| to_cost(total_kwh, p)).transpose()?;
    let co2_kg = meta.kg_co2_per_kwh.map(|c| to_co2(total_kwh, c)).transpose()?;

    let joules_per_response = ratio(
        ledger.per_request.values().map(|e| e.total()).sum(),
        ledger.per_request.len() as u64,
    );
    let ttft_ms = ratio(
        complete.iter().map(|(_, r)| r.ttft_ns() as f64 / 1e6).sum(),
        counts.complete,
    );

    Ok(MetricsReport {
        run_id: ledger.run_id.clone(),
        run_duration_s: duration_s,
        total_j: totals.total_j,
        prefill_j: totals.prefill_j,
        decode_j: totals.decode_j,
        idle_j: totals.idle_j,
        joules_per_generated_token: ratio(totals.decode_j, counts.generated_tokens),
        prefill_joules_per_request: ratio(totals.prefill_j, counts.requests),
        prefill_joules_per_prompt_token: ratio(totals.prefill_j, counts.prompt_tokens),
        joules_per_response,
        mean_power_w: totals.total_j / duration_s,
        peak_power_w: summary.peak_component_w,
        energy_delay_product,
        power_imbalance,
        throughput_tokens_per_s: counts.generated_tokens as f64 / duration_s,
        ttft_ms,
        total_kwh,
        cost_usd,
        co2_kg,
        counts,
        metadata: Metadata {
            run: meta.clone(),
            phase_source: timeline.phase_source.clone(),
            conventions: Conventions::current(timeline.overlap_policy),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::attribute;
    use crate::phase::{build_timeline, validate_events, EventKind::*, PhaseEvent};
    use proptest::prelude::*;

    const S: u64 = 1_000_000_000;

    fn close(a: f64, b: f64) -> bool {
        crate::attribution::relative_diff(a, b) < 1e-12
    }

    fn constant(id: &str, watts: f64, end: u64) -> Vec<PowerSample> {
        (0..=end / (S / 10))
            .map(|k| PowerSample::new(k * S / 10, id, watts))
            .collect()
    }

    fn session(complete: bool) -> PhaseTimeline {
        let mut ev = vec![
            PhaseEvent::run(0, "r", RunStart),
            PhaseEvent::request(0, "r", "a", PrefillStart).with_prompt_tokens(50),
            PhaseEvent::request(S, "r", "a", PrefillEnd),
            PhaseEvent::request(S, "r", "a", DecodeStart),
        ];
        if complete {
            ev.extend([
                PhaseEvent::request(3 * S, "r", "a", DecodeEnd),
                PhaseEvent::request(3 * S, "r", "a", RequestComplete).with_generated_tokens(100),
            ]);
        }
        ev.push(PhaseEvent::run(4 * S, "r", RunEnd));
        build_timeline(&validate_events(&ev).unwrap())
    }

    fn report(samples: &[PowerSample], t: &PhaseTimeline, meta: &RunMetadata) -> MetricsReport {
        let domains = BTreeMap::new();
        let l = attribute(samples, &domains, t).unwrap();
        let s = SamplesSummary::from_samples(samples, &domains, t.run_interval);
        compute_metrics(&l, t, &s, meta).unwrap()
    }

    #[test]
    fn basic_figures() {
        let t = session(true);
        let m = report(&constant("gpu0", 100.0, 4 * S), &t, &RunMetadata::new("r"));
        assert!(close(m.total_j, 400.0));
        assert!(close(m.mean_power_w, 100.0));
        assert!(close(m.joules_per_generated_token.unwrap(), 2.0));
        assert!(close(m.prefill_joules_per_request.unwrap(), 100.0));
        assert!(close(m.prefill_joules_per_prompt_token.unwrap(), 2.0));
        assert!(close(m.joules_per_response.unwrap(), 300.0));
        assert!(close(m.energy_delay_product, 1600.0));
        assert_eq!(m.peak_power_w, 100.0);
        assert_eq!(m.power_imbalance, Some(0.0));
        assert!(close(m.throughput_tokens_per_s, 25.0));
        assert_eq!(m.ttft_ms, Some(1000.0));
        assert_eq!(m.total_kwh, m.total_j / 3.6e6);
        assert_eq!(m.cost_usd, None);
        assert_eq!(m.metadata.conventions.overlap_policy, "prefill-precedence");
    }

    #[test]
    fn no_complete_requests_leaves_token_metrics_absent() {
        let t = session(false);
        let m = report(&constant("gpu0", 100.0, 4 * S), &t, &RunMetadata::new("r"));
        assert_eq!(m.counts.complete, 0);
        assert_eq!(m.counts.incomplete, 1);
        assert_eq!(m.joules_per_generated_token, None);
        assert_eq!(m.joules_per_response, None);
        assert_eq!(m.ttft_ms, None);
        assert!(m.prefill_joules_per_prompt_token.is_some());
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains("joules_per_response"));
    }

    #[test]
    fn rates_convert_kwh() {
        assert!(close(to_cost(3.6e6 / JOULES_PER_KWH, 0.10).unwrap(), 0.10));
        assert!(close(to_co2(1.0, 0.4).unwrap(), 0.4));
        assert_eq!(to_cost(0.0, 0.1).unwrap(), 0.0);
        assert_eq!(to_co2(0.0, 0.4).unwrap(), 0.0);
        assert!(matches!(to_cost(1.0, -0.1), Err(MetricsError::NegativeRate { .. })));

        let t = session(true);
        let meta = RunMetadata {
            price_usd_per_kwh: Some(0.1),
            kg_co2_per_kwh: Some(0.4),
            ..RunMetadata::new("r")
        };
        let m = report(&constant("gpu0", 100.0, 4 * S), &t, &meta);
        assert_eq!(m.cost_usd, Some(m.total_kwh * 0.1));
        assert_eq!(m.co2_kg, Some(m.total_kwh * 0.4));
    }

    #[test]
    fn edp_contract() {
        assert_eq!(energy_delay_product(400.0, 4.0).unwrap(), 1600.0);
        assert_eq!(energy_delay_product(0.0, 4.0).unwrap(), 0.0);
        assert_eq!(energy_delay_product(1.0, 0.0), Err(MetricsError::NonPositiveDuration));
    }

    #[test]
    fn edp_quarters_when_duration_halves_at_constant_power() {
        let idle_run = |end: u64| {
            let ev = vec![PhaseEvent::run(0, "r", RunStart), PhaseEvent::run(end, "r", RunEnd)];
            build_timeline(&validate_events(&ev).unwrap())
        };
        let long = report(&constant("gpu0", 200.0, 8 * S), &idle_run(8 * S), &RunMetadata::new("r"));
        let short = report(&constant("gpu0", 200.0, 4 * S), &idle_run(4 * S), &RunMetadata::new("r"));
        assert!(close(short.energy_delay_product, long.energy_delay_product / 4.0));
    }

    #[test]
    fn imbalance_examples() {
        let m = |v: &[f64]| -> BTreeMap<String, f64> {
            v.iter().enumerate().map(|(i, w)| (format!("gpu{i}"), *w)).collect()
        };
        assert_eq!(power_imbalance(&m(&[300.0; 4])).unwrap(), 0.0);
        assert!((power_imbalance(&m(&[200.0, 400.0])).unwrap() - 0.6667).abs() < 1e-4);
        assert_eq!(power_imbalance(&m(&[250.0])).unwrap(), 0.0);
        assert_eq!(power_imbalance(&BTreeMap::new()), Err(MetricsError::NoGpuSources));
    }

    #[test]
    fn mismatched_run() {
        let t = session(true);
        let mut l = attribute(&constant("gpu0", 1.0, 4 * S), &BTreeMap::new(), &t).unwrap();
        l.run_id = "other".into();
        assert!(matches!(
            compute_metrics(&l, &t, &SamplesSummary::default(), &RunMetadata::new("r")),
            Err(MetricsError::MismatchedRun { .. })
        ));
    }

    #[test]
    fn peak_sums_sources_at_union_of_instants() {
        let run = Span::new(0, 4 * S);
        let s = vec![
            PowerSample::new(0, "gpu0", 100.0),
            PowerSample::new(2 * S, "gpu0", 300.0),
            PowerSample::new(4 * S, "gpu0", 100.0),
            PowerSample::new(0, "cpu0", 50.0),
            PowerSample::new(4 * S, "cpu0", 50.0),
            PowerSample::new(0, "node", 9999.0),
            PowerSample::new(4 * S, "node", 9999.0),
        ];
        let p = SamplesSummary::from_samples(&s, &BTreeMap::new(), run);
        assert_eq!(p.peak_component_w, 350.0);
    }

    proptest! {
        #[test]
        fn imbalance_matches_independent_fold(v in prop::collection::vec(1.0f64..1000.0, 1..8)) {
            let map: BTreeMap<String, f64> =
                v.iter().enumerate().map(|(i, w)| (format!("gpu{i}"), *w)).collect();
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
            let expect = (sorted[sorted.len() - 1] - sorted[0]) / mean;
            prop_assert!((power_imbalance(&map).unwrap() - expect).abs() <= 1e-12 * expect.max(1.0));
        }

        #[test]
        fn peak_at_least_mean_and_jpt_conserves_decode(
            watts in prop::collection::vec(0.0f64..500.0, 5..30),
            cpu in 0.0f64..100.0,
        ) {
            let t = session(true);
            let step = 4 * S / (watts.len() as u64 - 1);
            let mut s: Vec<PowerSample> = watts
                .iter()
                .enumerate()
                .map(|(i, w)| PowerSample::new(i as u64 * step, "gpu0", *w))
                .collect();
            s.extend(constant("cpu0", cpu, 4 * S));
            let m = report(&s, &t, &RunMetadata::new("r"));
            prop_assert!(m.peak_power_w >= m.mean_power_w * (1.0 - 1e-12));
            let back = m.joules_per_generated_token.unwrap() * m.counts.generated_tokens as f64;
            prop_assert!(crate::attribution::relative_diff(back, m.decode_j) <= 1e-9);
        }
    }
}
