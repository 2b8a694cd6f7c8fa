//! Brute-force reference ledger.
//!
//! Walks the run in fixed steps, tags each step by the requests active at its
//! midpoint and integrates with the midpoint rectangle rule. Deliberately
//! shares nothing with `attribution` or `phase::timeline`: event pairing,
//! phase tagging, interpolation and the per-request split are all
//! reimplemented here.

use std::collections::{BTreeMap, BTreeSet};

use crate::attribution::{PhaseJoules, RequestEnergy};
use crate::phase::{EventKind, PhaseEvent};
use crate::sampler::{Domain, PowerSample};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceLedger {
    pub by_source_phase: BTreeMap<String, PhaseJoules>,
    /// Component sources only.
    pub totals: PhaseJoules,
    /// Complete requests only.
    pub per_request: BTreeMap<String, RequestEnergy>,
    pub incomplete_j: f64,
}

#[derive(Default, Clone)]
struct Req {
    prefill_start: Option<f64>,
    prefill_end: Option<f64>,
    decode_start: Option<f64>,
    decode_end: Option<f64>,
    complete: bool,
    prompt_tokens: f64,
}

/// Reference ledger at resolution `step_ns`. Sources missing from `domains`
/// count as components.
pub fn oracle_ledger(
    events: &[PhaseEvent],
    trace: &[PowerSample],
    domains: &BTreeMap<String, Domain>,
    step_ns: u64,
) -> ReferenceLedger {
    assert!(step_ns > 0);
    let mut out = ReferenceLedger::default();
    let run_start = events
        .iter()
        .filter(|e| e.kind == EventKind::RunStart)
        .map(|e| e.ts_ns)
        .min()
        .unwrap_or(0);
    let run_end = events
        .iter()
        .filter(|e| e.kind == EventKind::RunEnd)
        .map(|e| e.ts_ns)
        .max()
        .unwrap_or(run_start);

    let mut reqs: BTreeMap<&str, Req> = BTreeMap::new();
    for e in events {
        let Some(id) = e.request_id.as_deref() else { continue };
        let r = reqs.entry(id).or_default();
        let t = Some(e.ts_ns as f64);
        match e.kind {
            EventKind::PrefillStart => {
                r.prefill_start = t;
                r.prompt_tokens = e.prompt_tokens.unwrap_or(0) as f64;
            }
            EventKind::PrefillEnd => r.prefill_end = t,
            EventKind::DecodeStart => r.decode_start = t,
            EventKind::DecodeEnd => r.decode_end = t,
            EventKind::RequestComplete => r.complete = true,
            EventKind::RunStart | EventKind::RunEnd => {}
        }
    }
    let ids: Vec<&str> = reqs.keys().copied().collect();
    let reqs: Vec<Req> = reqs.into_values().collect();
    let end_f = run_end as f64;
    let prefill_of = |r: &Req| r.prefill_start.map(|s| (s, r.prefill_end.unwrap_or(end_f)));
    let decode_of = |r: &Req| r.decode_start.map(|s| (s, r.decode_end.unwrap_or(end_f)));

    // Sweep-line edge lists: (time, +1 enter / -1 leave, request index).
    let mut prefill_edges: Vec<(f64, i8, usize)> = Vec::new();
    let mut decode_edges: Vec<(f64, i8, usize)> = Vec::new();
    for (i, r) in reqs.iter().enumerate() {
        if let Some((a, b)) = prefill_of(r).filter(|(a, b)| a < b) {
            prefill_edges.extend([(a, 1, i), (b, -1, i)]);
        }
        if let Some((a, b)) = decode_of(r).filter(|(a, b)| a < b) {
            decode_edges.extend([(a, 1, i), (b, -1, i)]);
        }
    }
    let by_time = |x: &(f64, i8, usize), y: &(f64, i8, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
    prefill_edges.sort_by(by_time);
    decode_edges.sort_by(by_time);

    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for s in trace {
        series.entry(&s.source_id).or_default().push((s.ts_ns as f64, s.watts));
    }
    let ids_src: Vec<&str> = series.keys().copied().collect();
    let component: Vec<bool> = ids_src
        .iter()
        .map(|id| domains.get(*id).is_none_or(|d| d.is_component()))
        .collect();
    let series: Vec<Vec<(f64, f64)>> = series.into_values().collect();
    let mut cursor = vec![0usize; series.len()];
    let mut cells = vec![[0.0f64; 3]; series.len()];

    let mut prefilling: BTreeSet<usize> = BTreeSet::new();
    let mut decoding: BTreeSet<usize> = BTreeSet::new();
    let (mut pi, mut di) = (0usize, 0usize);
    let mut shares = vec![[0.0f64; 2]; reqs.len()];
    let mut pending = 0.0f64;
    let mut pending_tag: Option<(usize, Vec<usize>)> = None;

    let flush = |pending: &mut f64, tag: &Option<(usize, Vec<usize>)>, shares: &mut Vec<[f64; 2]>| {
        if let Some((slot, members)) = tag {
            if *slot == 0 {
                let total: f64 = members.iter().map(|&i| reqs[i].prompt_tokens).sum();
                for &i in members {
                    shares[i][0] += *pending * reqs[i].prompt_tokens / total;
                }
            } else {
                for &i in members {
                    shares[i][1] += *pending / members.len() as f64;
                }
            }
        }
        *pending = 0.0;
    };

    let mut t = run_start;
    while t < run_end {
        let dt = step_ns.min(run_end - t);
        let mid = t as f64 + dt as f64 / 2.0;
        let mut changed = t == run_start;
        while pi < prefill_edges.len() && prefill_edges[pi].0 <= mid {
            let (_, dir, i) = prefill_edges[pi];
            if dir > 0 { prefilling.insert(i); } else { prefilling.remove(&i); }
            pi += 1;
            changed = true;
        }
        while di < decode_edges.len() && decode_edges[di].0 <= mid {
            let (_, dir, i) = decode_edges[di];
            if dir > 0 { decoding.insert(i); } else { decoding.remove(&i); }
            di += 1;
            changed = true;
        }
        let phase = if !prefilling.is_empty() {
            0
        } else if !decoding.is_empty() {
            1
        } else {
            2
        };

        let mut step_component_j = 0.0;
        for (k, pts) in series.iter().enumerate() {
            while cursor[k] + 1 < pts.len() && pts[cursor[k] + 1].0 <= mid {
                cursor[k] += 1;
            }
            let c = cursor[k];
            if pts.len() < 2 || mid < pts[0].0 || mid > pts[pts.len() - 1].0 {
                continue;
            }
            let (t0, w0) = pts[c];
            let (t1, w1) = pts[(c + 1).min(pts.len() - 1)];
            let w = if t1 > t0 { w0 + (w1 - w0) * (mid - t0) / (t1 - t0) } else { w0 };
            let j = w * dt as f64 / 1e9;
            cells[k][phase] += j;
            if component[k] {
                step_component_j += j;
            }
        }

        if changed {
            flush(&mut pending, &pending_tag, &mut shares);
            pending_tag = match phase {
                0 => Some((0, prefilling.iter().copied().collect())),
                1 => Some((1, decoding.iter().copied().collect())),
                _ => None,
            };
        }
        pending += step_component_j;
        t += dt;
    }
    flush(&mut pending, &pending_tag, &mut shares);

    for (k, id) in ids_src.iter().enumerate() {
        let [p, d, i] = cells[k];
        let pj = PhaseJoules {
            prefill_j: p,
            decode_j: d,
            idle_j: i,
        };
        if component[k] {
            out.totals.prefill_j += p;
            out.totals.decode_j += d;
            out.totals.idle_j += i;
        }
        out.by_source_phase.insert(id.to_string(), pj);
    }
    for (i, r) in reqs.iter().enumerate() {
        if r.complete {
            out.per_request.insert(
                ids[i].to_string(),
                RequestEnergy {
                    prefill_j: shares[i][0],
                    decode_j: shares[i][1],
                },
            );
        } else {
            out.incomplete_j += shares[i][0] + shares[i][1];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, OverlapPattern, ScenarioSpec};

    const MS: u64 = 1_000_000;

    #[test]
    fn constant_power_matches_analytic_exactly() {
        let s = generate(&ScenarioSpec::single_gpu(11, 4, OverlapPattern::Staircase)).unwrap();
        let o = oracle_ledger(&s.events, &s.trace, &s.domains(), 1_000);
        let got = o.by_source_phase["gpu0"];
        let want = s.expected.by_source_phase["gpu0"];
        for (g, w) in [
            (got.prefill_j, want.prefill_j),
            (got.decode_j, want.decode_j),
            (got.idle_j, want.idle_j),
        ] {
            assert!((g - w).abs() <= 1e-9 * w.max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn empty_request_set_is_all_idle() {
        let s = generate(&ScenarioSpec::single_gpu(1, 0, OverlapPattern::Random)).unwrap();
        let o = oracle_ledger(&s.events, &s.trace, &s.domains(), 100 * MS);
        let g = o.by_source_phase["gpu0"];
        assert_eq!((g.prefill_j, g.decode_j), (0.0, 0.0));
        assert!((g.idle_j - 600.0).abs() < 1e-9);
        assert!(o.per_request.is_empty());
    }
}
