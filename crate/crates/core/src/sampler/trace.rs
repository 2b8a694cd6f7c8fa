//! Power trace files: CSV with header `ts_ns,source_id,watts`, LF line
//! endings, watts at milliwatt resolution (three fractional digits).

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{
    OpenError, PowerSample, ReadError, Reader, Reading, SamplerError, SourceSpec,
};

pub const TRACE_HEADER: &str = "ts_ns,source_id,watts";

/// Writes samples in the order given.
pub fn write_trace<'a, W: Write>(
    samples: impl IntoIterator<Item = &'a PowerSample>,
    out: W,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    out.write_all(TRACE_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for s in samples {
        writeln!(out, "{},{},{:.3}", s.ts_ns, s.source_id, s.watts)?;
    }
    out.flush()
}

pub fn record_trace<'a>(
    samples: impl IntoIterator<Item = &'a PowerSample>,
    path: impl AsRef<Path>,
) -> Result<(), SamplerError> {
    let file = File::create(path.as_ref())?;
    write_trace(samples, file)?;
    Ok(())
}

/// Parses a trace, checking the header, wattage validity and per-source
/// timestamp order.
pub fn read_trace<R: Read>(input: R, path_label: &str) -> Result<Vec<PowerSample>, SamplerError> {
    let err = |line: u64, detail: String| SamplerError::TraceFormat {
        path: path_label.to_string(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRACE_HEADER {
        return Err(err(1, format!("expected header {TRACE_HEADER:?}, got {header:?}")));
    }

    let mut last_ts: HashMap<String, u64> = HashMap::new();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let ts_ns = record[0]
            .parse::<u64>()
            .map_err(|_| err(line, format!("bad ts_ns {:?}", &record[0])))?;
        let source_id = record[1].to_string();
        let watts = record[2]
            .parse::<f64>()
            .map_err(|_| err(line, format!("bad watts {:?}", &record[2])))?;
        if !watts.is_finite() || watts < 0.0 {
            return Err(err(line, format!("watts must be finite and >= 0, got {watts}")));
        }
        if let Some(prev) = last_ts.insert(source_id.clone(), ts_ns) {
            if ts_ns <= prev {
                return Err(err(
                    line,
                    format!("ts_ns {ts_ns} not after {prev} for source {source_id}"),
                ));
            }
        }
        samples.push(PowerSample {
            ts_ns,
            source_id,
            watts,
        });
    }
    Ok(samples)
}

pub fn replay_trace(path: impl AsRef<Path>) -> Result<Vec<PowerSample>, SamplerError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_trace(file, &path.display().to_string())
}

/// Replays one source's recorded samples, one per tick, with their recorded
/// timestamps. `trace_source` selects the recorded id (default: own id).
pub(super) struct TraceReader {
    pending: VecDeque<(u64, f64)>,
}

impl TraceReader {
    pub(super) fn open(spec: &SourceSpec) -> Result<Self, OpenError> {
        let path = PathBuf::from(spec.required("path")?);
        if !path.exists() {
            return Err(OpenError::SensorUnavailable {
                source_id: spec.source_id.clone(),
                detail: format!("trace {} not found", path.display()),
            });
        }
        let wanted = spec.param("trace_source").unwrap_or(&spec.source_id);
        let samples = replay_trace(&path).map_err(|e| OpenError::BadParams {
            source_id: spec.source_id.clone(),
            detail: e.to_string(),
        })?;
        let pending = samples
            .into_iter()
            .filter(|s| s.source_id == wanted)
            .map(|s| (s.ts_ns, s.watts))
            .collect();
        Ok(Self { pending })
    }
}

impl Reader for TraceReader {
    fn read(&mut self, _ts_ns: u64) -> Result<Reading, ReadError> {
        match self.pending.pop_front() {
            Some((ts_ns, watts)) => Ok(Reading::Sample { ts_ns, watts }),
            None => Err(ReadError::Exhausted),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(samples: &[PowerSample]) -> Vec<PowerSample> {
        let mut buf = Vec::new();
        write_trace(samples, &mut buf).unwrap();
        read_trace(buf.as_slice(), "mem").unwrap()
    }

    #[test]
    fn empty_stream_is_header_only() {
        let mut buf = Vec::new();
        write_trace(&[], &mut buf).unwrap();
        assert_eq!(buf, b"ts_ns,source_id,watts\n");
        assert!(read_trace(buf.as_slice(), "mem").unwrap().is_empty());
    }

    #[test]
    fn format_is_fixed() {
        let mut buf = Vec::new();
        write_trace(
            &[
                PowerSample::new(0, "gpu0", 300.0),
                PowerSample::new(100_000_000, "cpu0", 49.1234),
            ],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "ts_ns,source_id,watts\n0,gpu0,300.000\n100000000,cpu0,49.123\n"
        );
    }

    #[test]
    fn rejects_bad_rows() {
        let bad_header = "ts,source,w\n";
        assert!(read_trace(bad_header.as_bytes(), "x").is_err());
        let negative = "ts_ns,source_id,watts\n0,a,-1.0\n";
        assert!(matches!(
            read_trace(negative.as_bytes(), "x"),
            Err(SamplerError::TraceFormat { line: 2, .. })
        ));
        let unordered = "ts_ns,source_id,watts\n5,a,1.0\n6,b,1.0\n5,a,2.0\n";
        assert!(matches!(
            read_trace(unordered.as_bytes(), "x"),
            Err(SamplerError::TraceFormat { line: 4, .. })
        ));
        let nan = "ts_ns,source_id,watts\n0,a,NaN\n";
        assert!(read_trace(nan.as_bytes(), "x").is_err());
    }

    #[test]
    fn thousand_synthetic_samples_roundtrip() {
        let samples: Vec<_> = (0..1000u64)
            .map(|i| PowerSample::new(i * 100_000_000, "gpu0", 250.0 + (i % 17) as f64 * 1.337))
            .collect();
        assert_eq!(roundtrip(&samples), samples);
    }

    fn sample_stream() -> impl Strategy<Value = Vec<PowerSample>> {
        prop::collection::vec((1u64..1_000_000, 0usize..3, 0u64..2_000_000_000), 0..200).prop_map(
            |rows| {
                let mut next_ts = [0u64; 3];
                rows.into_iter()
                    .map(|(gap, src, mw)| {
                        next_ts[src] += gap;
                        PowerSample::new(next_ts[src], format!("src{src}"), mw as f64 / 1000.0)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn replay_reproduces_recording(samples in sample_stream()) {
            let back = roundtrip(&samples);
            prop_assert_eq!(back.len(), samples.len());
            for (a, b) in back.iter().zip(&samples) {
                prop_assert_eq!(a.ts_ns, b.ts_ns);
                prop_assert_eq!(&a.source_id, &b.source_id);
                prop_assert_eq!(a.watts.to_bits(), b.watts.to_bits());
            }
        }
    }
}
