use std::collections::{BTreeMap, BTreeSet};

use super::validate::{RequestRecord, Span, ValidatedSession};
use super::Phase;

/// Resolves the engine phase of an instant from how many requests are in
/// prefill and in decode at that instant.
pub trait OverlapPolicy {
    fn resolve(&self, prefilling: usize, decoding: usize) -> Phase;
    fn name(&self) -> &'static str;
}

/// Prefill wins over decode: a prefill step occupies the whole engine step
/// in step-based continuous batching.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrefillPrecedence;

impl OverlapPolicy for PrefillPrecedence {
    fn resolve(&self, prefilling: usize, decoding: usize) -> Phase {
        if prefilling > 0 {
            Phase::Prefill
        } else if decoding > 0 {
            Phase::Decode
        } else {
            Phase::Idle
        }
    }

    fn name(&self) -> &'static str {
        "prefill-precedence"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineInterval {
    pub start_ns: u64,
    pub end_ns: u64,
    pub phase: Phase,
}

impl EngineInterval {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

/// A stretch of the run over which the set of prefilling and decoding
/// requests is constant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment<'a> {
    pub start_ns: u64,
    pub end_ns: u64,
    pub phase: Phase,
    pub prefilling: Vec<&'a str>,
    pub decoding: Vec<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseTimeline {
    pub run_id: String,
    pub run_interval: Span,
    /// Contiguous, non-overlapping, exactly covering `run_interval`; adjacent
    /// intervals always differ in phase.
    pub engine_intervals: Vec<EngineInterval>,
    pub requests: BTreeMap<String, RequestRecord>,
    pub phase_source: Option<String>,
    pub overlap_policy: &'static str,
}

pub fn build_timeline(session: &ValidatedSession) -> PhaseTimeline {
    build_timeline_with(session, &PrefillPrecedence)
}

pub fn build_timeline_with(session: &ValidatedSession, policy: &dyn OverlapPolicy) -> PhaseTimeline {
    let mut engine_intervals: Vec<EngineInterval> = Vec::new();
    for seg in segments(session.run, &session.requests, policy) {
        match engine_intervals.last_mut() {
            Some(last) if last.phase == seg.phase => last.end_ns = seg.end_ns,
            _ => engine_intervals.push(EngineInterval {
                start_ns: seg.start_ns,
                end_ns: seg.end_ns,
                phase: seg.phase,
            }),
        }
    }
    PhaseTimeline {
        run_id: session.run_id.clone(),
        run_interval: session.run,
        engine_intervals,
        requests: session.requests.clone(),
        phase_source: session.phase_source.clone(),
        overlap_policy: policy.name(),
    }
}

/// Splits the run at every request boundary and records who is active in
/// each piece.
fn segments<'a>(
    run: Span,
    requests: &'a BTreeMap<String, RequestRecord>,
    policy: &dyn OverlapPolicy,
) -> Vec<Segment<'a>> {
    let mut cuts: BTreeSet<u64> = BTreeSet::from([run.start_ns, run.end_ns]);
    for r in requests.values() {
        cuts.extend([r.prefill.start_ns, r.prefill.end_ns]);
        if let Some(d) = r.decode {
            cuts.extend([d.start_ns, d.end_ns]);
        }
    }
    let cuts: Vec<u64> = cuts.into_iter().collect();

    cuts.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let prefilling: Vec<&str> = requests
                .iter()
                .filter(|(_, r)| r.prefill.covers(a, b))
                .map(|(id, _)| id.as_str())
                .collect();
            let decoding: Vec<&str> = requests
                .iter()
                .filter(|(_, r)| r.decode.is_some_and(|d| d.covers(a, b)))
                .map(|(id, _)| id.as_str())
                .collect();
            Segment {
                start_ns: a,
                end_ns: b,
                phase: policy.resolve(prefilling.len(), decoding.len()),
                prefilling,
                decoding,
            }
        })
        .collect()
}

impl PhaseTimeline {
    pub fn run_duration_ns(&self) -> u64 {
        self.run_interval.duration_ns()
    }

    /// Engine phase at `t` (intervals are half-open; the run end belongs to
    /// the last interval).
    pub fn phase_at(&self, t: u64) -> Option<Phase> {
        if t < self.run_interval.start_ns || t > self.run_interval.end_ns {
            return None;
        }
        let idx = self.engine_intervals.partition_point(|iv| iv.end_ns <= t);
        self.engine_intervals
            .get(idx)
            .or(self.engine_intervals.last())
            .map(|iv| iv.phase)
    }

    pub fn phase_duration_ns(&self, phase: Phase) -> u64 {
        self.engine_intervals
            .iter()
            .filter(|iv| iv.phase == phase)
            .map(EngineInterval::duration_ns)
            .sum()
    }

    /// Fine-grained segments with their active request sets, using the
    /// prefill-precedence rule. Each segment lies inside one engine interval.
    pub fn segments(&self) -> Vec<Segment<'_>> {
        segments(self.run_interval, &self.requests, &PrefillPrecedence)
    }

    pub fn complete_requests(&self) -> impl Iterator<Item = (&String, &RequestRecord)> {
        self.requests.iter().filter(|(_, r)| r.complete)
    }

    pub fn incomplete_requests(&self) -> usize {
        self.requests.values().filter(|r| !r.complete).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{validate_events, EventKind, PhaseEvent};
    use proptest::prelude::*;
    use EventKind::*;

    const S: u64 = 1_000_000_000;

    fn full(id: &str, pf: (u64, u64), dc: (u64, u64)) -> Vec<PhaseEvent> {
        vec![
            PhaseEvent::request(pf.0, "r", id, PrefillStart).with_prompt_tokens(10),
            PhaseEvent::request(pf.1, "r", id, PrefillEnd),
            PhaseEvent::request(dc.0, "r", id, DecodeStart),
            PhaseEvent::request(dc.1, "r", id, DecodeEnd),
            PhaseEvent::request(dc.1, "r", id, RequestComplete).with_generated_tokens(5),
        ]
    }

    fn timeline(run: (u64, u64), reqs: Vec<Vec<PhaseEvent>>) -> PhaseTimeline {
        let mut ev = vec![PhaseEvent::run(run.0, "r", RunStart)];
        ev.extend(reqs.into_iter().flatten());
        ev.push(PhaseEvent::run(run.1, "r", RunEnd));
        build_timeline(&validate_events(&ev).unwrap())
    }

    fn iv(a: u64, b: u64, phase: Phase) -> EngineInterval {
        EngineInterval {
            start_ns: a,
            end_ns: b,
            phase,
        }
    }

    #[test]
    fn single_request() {
        let t = timeline((0, 4 * S), vec![full("a", (0, S), (S, 3 * S))]);
        assert_eq!(
            t.engine_intervals,
            vec![
                iv(0, S, Phase::Prefill),
                iv(S, 3 * S, Phase::Decode),
                iv(3 * S, 4 * S, Phase::Idle)
            ]
        );
        assert_eq!(t.phase_at(0), Some(Phase::Prefill));
        assert_eq!(t.phase_at(S), Some(Phase::Decode));
        assert_eq!(t.phase_at(4 * S), Some(Phase::Idle));
        assert_eq!(t.phase_at(4 * S + 1), None);
    }

    #[test]
    fn prefill_preempts_concurrent_decode() {
        // A: prefill [0,1), decode [1,5); B: prefill [2,3), decode [3,5)
        let t = timeline(
            (S, 5 * S),
            vec![
                full("a", (S, S), (S, 5 * S)),
                full("b", (2 * S, 3 * S), (3 * S, 5 * S)),
            ],
        );
        assert_eq!(
            t.engine_intervals,
            vec![
                iv(S, 2 * S, Phase::Decode),
                iv(2 * S, 3 * S, Phase::Prefill),
                iv(3 * S, 5 * S, Phase::Decode)
            ]
        );
    }

    #[test]
    fn empty_run_is_idle() {
        let t = timeline((0, 2 * S), vec![]);
        assert_eq!(t.engine_intervals, vec![iv(0, 2 * S, Phase::Idle)]);
    }

    #[test]
    fn zero_length_run_has_no_intervals() {
        let t = timeline((7, 7), vec![]);
        assert!(t.engine_intervals.is_empty());
    }

    #[test]
    fn segments_track_active_sets() {
        let t = timeline(
            (0, 10),
            vec![full("a", (0, 4), (4, 8)), full("b", (2, 4), (4, 10))],
        );
        let segs = t.segments();
        assert_eq!(segs[0].prefilling, vec!["a"]);
        assert_eq!(segs[1].prefilling, vec!["a", "b"]);
        assert_eq!(segs[2].decoding, vec!["a", "b"]);
        assert_eq!(segs[3].decoding, vec!["b"]);
    }

    /// Random overlapping requests on a small nanosecond range.
    fn random_session() -> impl Strategy<Value = Vec<PhaseEvent>> {
        prop::collection::vec(
            (0u64..60, 0u64..20, 0u64..10, 0u64..30, any::<bool>()),
            0..6,
        )
        .prop_map(|reqs| {
            let mut ev = vec![PhaseEvent::run(0, "r", RunStart)];
            for (i, (s, p, g, d, complete)) in reqs.into_iter().enumerate() {
                let id = format!("q{i}");
                let t = [s, s + p, s + p + g, s + p + g + d, s + p + g + d];
                let mut full = full(&id, (t[0], t[1]), (t[2], t[3]));
                if !complete {
                    full.truncate(3);
                }
                ev.extend(full);
            }
            ev.push(PhaseEvent::run(130, "r", RunEnd));
            ev
        })
    }

    proptest! {
        #[test]
        fn intervals_partition_the_run(ev in random_session()) {
            let t = build_timeline(&validate_events(&ev).unwrap());
            let total: u64 = t.engine_intervals.iter().map(EngineInterval::duration_ns).sum();
            prop_assert_eq!(total, t.run_duration_ns());
            prop_assert_eq!(t.engine_intervals.first().unwrap().start_ns, t.run_interval.start_ns);
            prop_assert_eq!(t.engine_intervals.last().unwrap().end_ns, t.run_interval.end_ns);
            for w in t.engine_intervals.windows(2) {
                prop_assert_eq!(w[0].end_ns, w[1].start_ns);
                prop_assert_ne!(w[0].phase, w[1].phase);
            }
        }

        #[test]
        fn matches_per_nanosecond_oracle(ev in random_session()) {
            let session = validate_events(&ev).unwrap();
            let t = build_timeline(&session);
            prop_assert_eq!(&t, &build_timeline(&session));
            for ns in t.run_interval.start_ns..t.run_interval.end_ns {
                let in_prefill = session.requests.values()
                    .any(|r| r.prefill.start_ns <= ns && ns < r.prefill.end_ns);
                let in_decode = session.requests.values()
                    .any(|r| r.decode.is_some_and(|d| d.start_ns <= ns && ns < d.end_ns));
                let expect = if in_prefill { Phase::Prefill } else if in_decode { Phase::Decode } else { Phase::Idle };
                prop_assert_eq!(t.phase_at(ns), Some(expect), "at {}", ns);
            }
        }
    }
}
