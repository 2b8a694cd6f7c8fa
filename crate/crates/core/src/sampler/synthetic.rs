//! Synthetic waveforms for tests and dry runs.
//!
//! `wave = "constant"` uses `watts`; `"square"` alternates `high` and `low`
//! every half `period_ms`, starting high; `"ramp"` goes linearly from `from`
//! to `to` over `duration_ms` and then holds `to`.

use super::{OpenError, ReadError, Reader, Reading, SourceSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Wave {
    Constant { watts: f64 },
    Square { low: f64, high: f64, period_ns: u64 },
    Ramp { from: f64, to: f64, duration_ns: u64 },
}

impl Wave {
    fn at(&self, ts_ns: u64) -> f64 {
        match *self {
            Wave::Constant { watts } => watts,
            Wave::Square {
                low,
                high,
                period_ns,
            } => {
                if ts_ns % period_ns < period_ns / 2 {
                    high
                } else {
                    low
                }
            }
            Wave::Ramp {
                from,
                to,
                duration_ns,
            } => {
                if ts_ns >= duration_ns {
                    to
                } else {
                    from + (to - from) * (ts_ns as f64 / duration_ns as f64)
                }
            }
        }
    }
}

pub(super) struct SyntheticReader {
    wave: Wave,
}

impl SyntheticReader {
    pub(super) fn open(spec: &SourceSpec) -> Result<Self, OpenError> {
        let watts = |key: &str, default: Option<f64>| -> Result<f64, OpenError> {
            let v = match (spec.parsed::<f64>(key)?, default) {
                (Some(v), _) => v,
                (None, Some(d)) => d,
                (None, None) => {
                    return Err(OpenError::BadParams {
                        source_id: spec.source_id.clone(),
                        detail: format!("missing parameter `{key}`"),
                    })
                }
            };
            if !v.is_finite() || v < 0.0 {
                return Err(OpenError::BadParams {
                    source_id: spec.source_id.clone(),
                    detail: format!("`{key}` must be a non-negative wattage"),
                });
            }
            Ok(v)
        };
        let millis = |key: &str| -> Result<u64, OpenError> {
            match spec.parsed::<u64>(key)? {
                Some(ms) if ms >= 1 => Ok(ms * 1_000_000),
                _ => Err(OpenError::BadParams {
                    source_id: spec.source_id.clone(),
                    detail: format!("`{key}` must be an integer >= 1"),
                }),
            }
        };
        let wave = match spec.param("wave").unwrap_or("constant") {
            "constant" => Wave::Constant {
                watts: watts("watts", None)?,
            },
            "square" => Wave::Square {
                low: watts("low", Some(0.0))?,
                high: watts("high", None)?,
                period_ns: millis("period_ms")?,
            },
            "ramp" => Wave::Ramp {
                from: watts("from", Some(0.0))?,
                to: watts("to", None)?,
                duration_ns: millis("duration_ms")?,
            },
            other => {
                return Err(OpenError::BadParams {
                    source_id: spec.source_id.clone(),
                    detail: format!("unknown wave {other:?}"),
                })
            }
        };
        Ok(Self { wave })
    }
}

impl Reader for SyntheticReader {
    fn read(&mut self, ts_ns: u64) -> Result<Reading, ReadError> {
        Ok(Reading::Watts(self.wave.at(ts_ns)))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{open_source, sample_once, Backend, Domain};
    use super::*;

    fn spec() -> SourceSpec {
        SourceSpec::new("s", Domain::Other, Backend::Synthetic)
    }

    #[test]
    fn square_wave() {
        let mut h = open_source(
            &spec()
                .with_param("wave", "square")
                .with_param("high", "300")
                .with_param("low", "60")
                .with_param("period_ms", "10"),
        )
        .unwrap();
        assert_eq!(sample_once(&mut h, 0).unwrap().watts, 300.0);
        assert_eq!(sample_once(&mut h, 4_999_999).unwrap().watts, 300.0);
        assert_eq!(sample_once(&mut h, 5_000_000).unwrap().watts, 60.0);
        assert_eq!(sample_once(&mut h, 10_000_000).unwrap().watts, 300.0);
    }

    #[test]
    fn ramp_wave() {
        let mut h = open_source(
            &spec()
                .with_param("wave", "ramp")
                .with_param("to", "100")
                .with_param("duration_ms", "10000"),
        )
        .unwrap();
        assert_eq!(sample_once(&mut h, 0).unwrap().watts, 0.0);
        assert_eq!(sample_once(&mut h, 5_000_000_000).unwrap().watts, 50.0);
        assert_eq!(sample_once(&mut h, 20_000_000_000).unwrap().watts, 100.0);
    }

    #[test]
    fn rejects_bad_waves() {
        assert!(open_source(&spec()).is_err());
        assert!(open_source(&spec().with_param("watts", "-1")).is_err());
        assert!(open_source(&spec().with_param("wave", "sine").with_param("watts", "1")).is_err());
        assert!(open_source(
            &spec()
                .with_param("wave", "square")
                .with_param("high", "1")
                .with_param("period_ms", "0")
        )
        .is_err());
    }
}
