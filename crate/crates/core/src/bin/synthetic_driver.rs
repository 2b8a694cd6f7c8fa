//! Scripted workload for live runs. Reads the harness environment, then
//! applies `--key value` overrides (`--requests 8 --decode-ms 200`).

use std::process::ExitCode;

use phasewatt::synth::driver::{drive, DriverError, DriverOptions};

fn run() -> Result<(), DriverError> {
    let mut opts = DriverOptions::from_env()?;
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| DriverError::BadValue {
            key: "argument".into(),
            value: flag.clone(),
        })?;
        let value = args.next().ok_or_else(|| DriverError::BadValue {
            key: key.to_string(),
            value: String::new(),
        })?;
        opts.set(key, &value)?;
    }
    let summary = drive(&opts)?;
    println!("sent {} events for {} requests", summary.events_sent, summary.requests);
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
