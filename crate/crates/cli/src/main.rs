//! `phasewatt` command-line front end.
//!
//! Exit codes: 0 ok, 2 usage or configuration, 3 data validation, 4 runtime.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use phasewatt::analysis::{analyze, load_recorded, AnalysisError, ReplayError};
use phasewatt::orchestrator::{
    execute_run, execute_sweep, parse_config, ConfigError, DatasetError, ParsedConfig, RunConfig,
    RunError, RunOptions,
};
use phasewatt::phase::EventFileError;
use phasewatt::report::{write_run_outputs, write_sweep_report, ReportError, SWEEP_CSV_FILE};
use phasewatt::sampler::{OpenError, SamplerError};
use phasewatt::synth::driver::{drive, DriverError, DriverOptions};
use phasewatt::synth::{generate, ScenarioSpec, SynthError};
use phasewatt::MetricsReport;

#[derive(Parser)]
#[command(name = "phasewatt", version, about = "Phase-aligned energy benchmarking for LLM inference")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Rates {
    /// Electricity price in USD/kWh; overrides the config.
    #[arg(long, value_name = "USD_PER_KWH")]
    price: Option<f64>,
    /// Carbon intensity in kg CO2/kWh; overrides the config.
    #[arg(long, value_name = "KG_PER_KWH")]
    carbon: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a single-run config.
    Run {
        config: PathBuf,
        /// Artifact root; each run writes to <out>/<run_id>/.
        #[arg(long, env = "TPB_OUT", default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        rates: Rates,
    },
    /// Execute every run of a sweep config, then write the sweep report.
    Sweep {
        config: PathBuf,
        #[arg(long, env = "TPB_OUT", default_value = "runs")]
        out: PathBuf,
        #[command(flatten)]
        rates: Rates,
    },
    /// Re-analyse a recorded trace and events file offline.
    Replay {
        trace: PathBuf,
        events: PathBuf,
        /// Run record (run.json); defaults to the one beside the trace.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Directory receiving ledger.json, metrics.json and run.json.
        #[arg(long, env = "TPB_OUT", default_value = "replay")]
        out: PathBuf,
        #[command(flatten)]
        rates: Rates,
    },
    /// Generate a synthetic scenario with known energies.
    Synth {
        spec: PathBuf,
        #[arg(long, env = "TPB_OUT", default_value = "synth")]
        out: PathBuf,
        /// Also analyse the scenario and write ledger.json and metrics.json.
        #[arg(long)]
        analyze: bool,
    },
    /// Aggregate run directories into sweep.csv, sweep.json and a breakdown.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long, env = "TPB_OUT", default_value = "report")]
        out: PathBuf,
    },
    /// Scripted workload speaking the event protocol (for `{harness}`).
    DriveSynthetic {
        #[arg(long)]
        requests: Option<String>,
        #[arg(long)]
        concurrency: Option<String>,
        #[arg(long)]
        prefill_ms: Option<String>,
        #[arg(long)]
        decode_ms: Option<String>,
        #[arg(long)]
        idle_ms: Option<String>,
        #[arg(long)]
        ms_per_token: Option<String>,
        #[arg(long)]
        phase_source: Option<String>,
        #[arg(long)]
        prompts: Option<String>,
        /// Exit without sending RunEnd.
        #[arg(long)]
        skip_run_end: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Self {
            code: 4,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::NotFound(path) => Failure::usage(format!("config not found: {}", path.display())),
            ConfigError::Io { .. } => Failure::runtime(e),
            e => Failure::usage(e.to_string()),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::data(e)
    }
}

fn replay_class(e: &ReplayError) -> u8 {
    match e {
        ReplayError::Trace(SamplerError::Io(_)) | ReplayError::Events(EventFileError::Io(_)) => 4,
        _ => 3,
    }
}

impl From<ReplayError> for Failure {
    fn from(e: ReplayError) -> Self {
        Failure {
            code: replay_class(&e),
            message: e.to_string(),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => Failure::runtime(e),
            ReportError::EmptyTable => Failure::usage(e.to_string()),
            e => Failure::data(e),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure {
            code: run_class(&e),
            message: e.to_string(),
        }
    }
}

fn run_class(e: &RunError) -> u8 {
    match e {
        RunError::Config(ConfigError::Io { .. }) => 4,
        RunError::Config(_) | RunError::Source(OpenError::BadParams { .. }) => 2,
        RunError::Dataset(DatasetError::Io { .. } | DatasetError::Counter(_)) => 4,
        RunError::Dataset(_) => 3,
        RunError::Replay(r) => replay_class(r),
        RunError::Report(ReportError::Io { .. }) => 4,
        RunError::Report(_) => 3,
        RunError::InSweep { source, .. } => run_class(source),
        _ => 4,
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Spec { .. } | SynthError::InfeasibleSpec(_) => Failure::usage(e.to_string()),
            e => Failure::runtime(e),
        }
    }
}

impl From<DriverError> for Failure {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::MissingEnv(_) | DriverError::BadValue { .. } => Failure::usage(e.to_string()),
            e => Failure::runtime(e),
        }
    }
}

fn fmt_opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4} {unit}"))
}

fn summary_line(m: &MetricsReport) -> String {
    format!(
        "{}: total {:.3} J, {}, peak {:.1} W, truncated: {}",
        m.run_id,
        m.total_j,
        fmt_opt(m.joules_per_generated_token, "J/token"),
        m.peak_power_w,
        m.metadata.run.truncated
    )
}

fn apply_rates(config: &mut RunConfig, rates: &Rates) {
    if rates.price.is_some() {
        config.price_usd_per_kwh = rates.price;
    }
    if rates.carbon.is_some() {
        config.kg_co2_per_kwh = rates.carbon;
    }
}

fn check_rates(rates: &Rates) -> Result<(), Failure> {
    for (flag, v) in [("--price", rates.price), ("--carbon", rates.carbon)] {
        if let Some(x) = v {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Failure::usage(format!("{flag} must be a non-negative number")));
            }
        }
    }
    Ok(())
}

fn options(out: &Path) -> RunOptions {
    RunOptions {
        out_dir: out.to_path_buf(),
        harness_exe: std::env::current_exe().ok(),
    }
}

fn cmd_run(config: &Path, out: &Path, rates: &Rates) -> Result<(), Failure> {
    check_rates(rates)?;
    let mut config = match parse_config(config)? {
        ParsedConfig::Run(c) => *c,
        ParsedConfig::Sweep(_) => return Err(Failure::usage("config has a [sweep] table; use `phasewatt sweep`")),
    };
    apply_rates(&mut config, rates);
    let art = execute_run(&config, &options(out))?;
    println!("{}", summary_line(&art.metrics));
    println!("artifacts: {}", art.run_dir.display());
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path, rates: &Rates) -> Result<(), Failure> {
    check_rates(rates)?;
    let mut plan = match parse_config(config)? {
        ParsedConfig::Sweep(p) => *p,
        ParsedConfig::Run(_) => return Err(Failure::usage("config has no [sweep] table; use `phasewatt run`")),
    };
    for run in &mut plan.runs {
        apply_rates(run, rates);
    }
    println!("sweep: {} runs", plan.runs.len());
    let runs = execute_sweep(&plan, &options(out), |i, n, art| {
        println!("[{i}/{n}] {}", summary_line(&art.metrics));
    })?;
    let dirs: Vec<PathBuf> = runs.iter().map(|a| a.run_dir.clone()).collect();
    write_sweep_report(&dirs, out)?;
    println!("report: {}", out.join(SWEEP_CSV_FILE).display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} not found: {}", path.display())))
    }
}

fn cmd_replay(trace: &Path, events: &Path, meta: Option<&Path>, out: &Path, rates: &Rates) -> Result<(), Failure> {
    check_rates(rates)?;
    require_file(trace, "trace")?;
    require_file(events, "events")?;
    if let Some(m) = meta {
        require_file(m, "run record")?;
    }
    let mut recorded = load_recorded(trace, events, meta)?;
    if rates.price.is_some() {
        recorded.record.meta.price_usd_per_kwh = rates.price;
    }
    if rates.carbon.is_some() {
        recorded.record.meta.kg_co2_per_kwh = rates.carbon;
    }
    let analysis = analyze(&recorded.samples, &recorded.events, &recorded.record)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    write_run_outputs(out, &analysis, &recorded.record)?;
    println!("{}", summary_line(&analysis.metrics));
    Ok(())
}

fn cmd_synth(spec: &Path, out: &Path, also_analyze: bool) -> Result<(), Failure> {
    require_file(spec, "scenario spec")?;
    let spec = ScenarioSpec::from_toml_file(spec)?;
    let scenario = generate(&spec)?;
    scenario.write_to(out)?;
    println!(
        "{}: {} requests, {} samples, expected total {:.3} J -> {}",
        spec.run_id,
        scenario.requests.len(),
        scenario.trace.len(),
        scenario.expected.totals.total(),
        out.display()
    );
    if also_analyze {
        let record = scenario.run_record();
        let analysis = analyze(&scenario.trace, &scenario.events, &record)?;
        write_run_outputs(out, &analysis, &record)?;
        println!("{}", summary_line(&analysis.metrics));
    }
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    if dirs.is_empty() {
        return Err(Failure::usage("report needs at least one run directory"));
    }
    for d in dirs {
        if !d.is_dir() {
            return Err(Failure::usage(format!("run directory not found: {}", d.display())));
        }
    }
    let table = write_sweep_report(dirs, out)?;
    println!("{} runs -> {}", table.rows.len(), out.join(SWEEP_CSV_FILE).display());
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { config, out, rates } => cmd_run(&config, &out, &rates),
        Cmd::Sweep { config, out, rates } => cmd_sweep(&config, &out, &rates),
        Cmd::Replay {
            trace,
            events,
            meta,
            out,
            rates,
        } => cmd_replay(&trace, &events, meta.as_deref(), &out, &rates),
        Cmd::Synth { spec, out, analyze } => cmd_synth(&spec, &out, analyze),
        Cmd::Report { dirs, out } => cmd_report(&dirs, &out),
        Cmd::DriveSynthetic {
            requests,
            concurrency,
            prefill_ms,
            decode_ms,
            idle_ms,
            ms_per_token,
            phase_source,
            prompts,
            skip_run_end,
        } => {
            let mut opts = DriverOptions::from_env()?;
            for (key, value) in [
                ("requests", requests),
                ("concurrency", concurrency),
                ("prefill-ms", prefill_ms),
                ("decode-ms", decode_ms),
                ("idle-ms", idle_ms),
                ("ms-per-token", ms_per_token),
                ("phase-source", phase_source),
                ("prompts", prompts),
            ] {
                if let Some(v) = value {
                    opts.set(key, &v)?;
                }
            }
            opts.skip_run_end |= skip_run_end;
            let s = drive(&opts)?;
            println!("sent {} events for {} requests", s.events_sent, s.requests);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            for line in f.message.lines() {
                eprintln!("error: {line}");
            }
            ExitCode::from(f.code)
        }
    }
}
