//! Baseboard (whole-node) power via a query command, typically
//! `ipmitool dcmi power reading`.

use std::process::Command;

use super::{OpenError, ReadError, Reader, Reading, SourceSpec};

const DEFAULT_COMMAND: &str = "ipmitool dcmi power reading";

/// Extracts the instantaneous reading in watts from DCMI output such as
/// `    Instantaneous power reading:                   312 Watts`.
pub fn parse_dcmi_power_reading(output: &str) -> Option<f64> {
    output.lines().find_map(|line| {
        let (label, value) = line.split_once(':')?;
        if !label.to_ascii_lowercase().contains("instantaneous power reading") {
            return None;
        }
        value.split_whitespace().next()?.parse::<f64>().ok()
    })
}

pub(super) fn run_shell(cmd: &str) -> Result<String, String> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .output()
        .map_err(|e| format!("spawning `{cmd}`: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub(super) struct BaseboardReader {
    command: String,
}

impl BaseboardReader {
    pub(super) fn open(spec: &SourceSpec) -> Result<Self, OpenError> {
        let reader = Self {
            command: spec.param("command").unwrap_or(DEFAULT_COMMAND).to_string(),
        };
        reader
            .poll()
            .map_err(|detail| OpenError::SensorUnavailable {
                source_id: spec.source_id.clone(),
                detail,
            })?;
        Ok(reader)
    }

    fn poll(&self) -> Result<f64, String> {
        let out = run_shell(&self.command)?;
        parse_dcmi_power_reading(&out)
            .ok_or_else(|| "no instantaneous power reading in command output".to_string())
    }
}

impl Reader for BaseboardReader {
    fn read(&mut self, _ts_ns: u64) -> Result<Reading, ReadError> {
        self.poll().map(Reading::Watts).map_err(ReadError::Failed)
    }
}
