//! Cumulative energy counters (powercap `energy_uj` files).

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{OpenError, ReadError, Reader, Reading, SourceSpec};

/// One read of a cumulative microjoule counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterReading {
    pub ts_ns: u64,
    pub energy_microjoules: u64,
    pub wrap_max_microjoules: u64,
}

impl CounterReading {
    /// Average power between `prev` and `self`, or `None` when no time passed.
    pub fn watts_since(&self, prev: &CounterReading) -> Option<f64> {
        if self.ts_ns <= prev.ts_ns {
            return None;
        }
        let delta_uj = counter_delta_uj(
            prev.energy_microjoules,
            self.energy_microjoules,
            self.wrap_max_microjoules,
        );
        let dt_s = (self.ts_ns - prev.ts_ns) as f64 / 1e9;
        Some(delta_uj as f64 / 1e6 / dt_s)
    }
}

/// Energy consumed between two counter values. A decrease means the counter
/// wrapped once at `wrap_max`.
pub fn counter_delta_uj(prev: u64, curr: u64, wrap_max: u64) -> u64 {
    if curr >= prev {
        curr - prev
    } else {
        (wrap_max - prev) + curr
    }
}

pub(super) struct CounterFileReader {
    path: PathBuf,
    wrap_max: u64,
    prev: Option<CounterReading>,
}

impl CounterFileReader {
    pub(super) fn open(spec: &SourceSpec) -> Result<Self, OpenError> {
        let path = PathBuf::from(spec.required("path")?);
        probe(spec, &path)?;

        let wrap_max = match spec.parsed::<u64>("max_uj")? {
            Some(v) => v,
            None => {
                let max_path = match spec.param("max_path") {
                    Some(p) => PathBuf::from(p),
                    None => path.with_file_name("max_energy_range_uj"),
                };
                probe(spec, &max_path)?
            }
        };
        if wrap_max == 0 {
            return Err(OpenError::BadParams {
                source_id: spec.source_id.clone(),
                detail: "counter range must be positive".into(),
            });
        }
        Ok(Self {
            path,
            wrap_max,
            prev: None,
        })
    }
}

fn probe(spec: &SourceSpec, path: &Path) -> Result<u64, OpenError> {
    match read_counter(path) {
        Ok(v) => Ok(v),
        Err(CounterFileError::Io(e)) if e.kind() == ErrorKind::PermissionDenied => {
            Err(OpenError::PermissionDenied {
                source_id: spec.source_id.clone(),
                path: path.display().to_string(),
            })
        }
        Err(e) => Err(OpenError::SensorUnavailable {
            source_id: spec.source_id.clone(),
            detail: format!("{}: {e}", path.display()),
        }),
    }
}

#[derive(Debug, thiserror::Error)]
enum CounterFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an unsigned integer: {0:?}")]
    Parse(String),
}

fn read_counter(path: &Path) -> Result<u64, CounterFileError> {
    let raw = fs::read_to_string(path)?;
    raw.trim()
        .parse::<u64>()
        .map_err(|_| CounterFileError::Parse(raw.trim().to_string()))
}

impl Reader for CounterFileReader {
    fn read(&mut self, ts_ns: u64) -> Result<Reading, ReadError> {
        let energy = read_counter(&self.path).map_err(|e| ReadError::Failed(e.to_string()))?;
        if energy >= self.wrap_max {
            return Err(ReadError::Failed(format!(
                "counter value {energy} outside range {}",
                self.wrap_max
            )));
        }
        let curr = CounterReading {
            ts_ns,
            energy_microjoules: energy,
            wrap_max_microjoules: self.wrap_max,
        };
        let prev = self.prev.replace(curr);
        match prev.and_then(|p| curr.watts_since(&p)) {
            Some(w) => Ok(Reading::Watts(w)),
            None => Err(ReadError::NoDelta),
        }
    }
}
