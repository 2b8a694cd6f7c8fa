//! Vendor GPU telemetry.
//!
//! Management interfaces report instantaneous power in milliwatts. Readings
//! come either from a file holding a milliwatt integer (`milliwatts_file`) or
//! from a query command (`command`, default `nvidia-smi`), whose output unit
//! is set with `unit` (`W` or `mW`).

use std::fs;
use std::path::PathBuf;

use super::baseboard::run_shell;
use super::{OpenError, ReadError, Reader, Reading, SourceSpec};

const DEFAULT_QUERY: &str =
    "nvidia-smi --query-gpu=power.draw --format=csv,noheader,nounits --id={device}";

pub fn milliwatts_to_watts(milliwatts: u64) -> f64 {
    milliwatts as f64 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Watts,
    Milliwatts,
}

enum Origin {
    File(PathBuf),
    Command(String),
}

pub(super) struct GpuReader {
    origin: Origin,
    unit: Unit,
}

impl GpuReader {
    pub(super) fn open(spec: &SourceSpec) -> Result<Self, OpenError> {
        let device = spec.parsed::<u32>("device")?.unwrap_or(0);
        let (origin, default_unit) = match spec.param("milliwatts_file") {
            Some(path) => (Origin::File(PathBuf::from(path)), Unit::Milliwatts),
            None => {
                let template = spec.param("command").unwrap_or(DEFAULT_QUERY);
                (
                    Origin::Command(template.replace("{device}", &device.to_string())),
                    Unit::Watts,
                )
            }
        };
        let unit = match spec.param("unit") {
            None => default_unit,
            Some("W") | Some("w") => Unit::Watts,
            Some("mW") | Some("mw") => Unit::Milliwatts,
            Some(other) => {
                return Err(OpenError::BadParams {
                    source_id: spec.source_id.clone(),
                    detail: format!("unit must be W or mW, got {other:?}"),
                })
            }
        };
        let mut reader = Self { origin, unit };
        reader.read_watts().map_err(|detail| OpenError::SensorUnavailable {
            source_id: spec.source_id.clone(),
            detail,
        })?;
        Ok(reader)
    }

    fn read_watts(&mut self) -> Result<f64, String> {
        let raw = match &self.origin {
            Origin::File(path) => {
                fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?
            }
            Origin::Command(cmd) => run_shell(cmd)?,
        };
        let text = raw.lines().next().unwrap_or("").trim();
        match self.unit {
            Unit::Milliwatts => text
                .parse::<u64>()
                .map(milliwatts_to_watts)
                .map_err(|_| format!("expected milliwatt integer, got {text:?}")),
            Unit::Watts => text
                .parse::<f64>()
                .map_err(|_| format!("expected watts, got {text:?}")),
        }
    }
}

impl Reader for GpuReader {
    fn read(&mut self, _ts_ns: u64) -> Result<Reading, ReadError> {
        self.read_watts().map(Reading::Watts).map_err(ReadError::Failed)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{open_source, sample_once, Backend, Domain};
    use super::*;

    #[test]
    fn milliwatt_file_is_converted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("power_mw");
        fs::write(&path, "312450\n").unwrap();
        let spec = SourceSpec::new("gpu0", Domain::Gpu, Backend::GpuTelemetry)
            .with_param("milliwatts_file", path.display().to_string());
        let mut h = open_source(&spec).unwrap();
        assert_eq!(sample_once(&mut h, 7).unwrap().watts, 312.45);
    }

    #[test]
    fn command_output_in_watts() {
        let spec = SourceSpec::new("gpu1", Domain::Gpu, Backend::GpuTelemetry)
            .with_param("device", "1")
            .with_param("command", "echo 2{device}5.5");
        let mut h = open_source(&spec).unwrap();
        assert_eq!(sample_once(&mut h, 0).unwrap().watts, 215.5);
    }

    #[test]
    fn absent_device_fails_at_open() {
        let spec = SourceSpec::new("gpu0", Domain::Gpu, Backend::GpuTelemetry)
            .with_param("command", "exit 9");
        assert!(matches!(
            open_source(&spec),
            Err(OpenError::SensorUnavailable { .. })
        ));
    }
}
