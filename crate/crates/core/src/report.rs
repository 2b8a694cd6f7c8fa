//! JSON and CSV serialization of ledgers, metrics, run records and sweep
//! tables.
//!
//! Every JSON file carries a `schema` tag naming its type and version. Keys
//! come out in a fixed order (struct declaration order, sorted map keys) and
//! absent optional values are omitted, never written as `null`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Analysis, RunRecord, LEDGER_FILE, METRICS_FILE, RUN_FILE};
use crate::attribution::EnergyLedger;
use crate::metrics::{Conventions, MetricsReport};
use crate::phase::Phase;

pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const SWEEP_JSON_FILE: &str = "sweep.json";
pub const BREAKDOWN_CSV_FILE: &str = "energy_breakdown.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: schema {found:?}, expected {expected:?}")]
    SchemaMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{dir}: missing {file}")]
    MissingArtifact { dir: PathBuf, file: &'static str },
    #[error("runs were analysed under different conventions ({first} vs {other})")]
    ConventionMismatch { first: String, other: String },
    #[error("table has no rows")]
    EmptyTable,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A type written as a versioned JSON document.
pub trait Schema {
    const SCHEMA: &'static str;
}

impl Schema for MetricsReport {
    const SCHEMA: &'static str = "phasewatt.metrics.v1";
}

impl Schema for EnergyLedger {
    const SCHEMA: &'static str = "phasewatt.ledger.v1";
}

impl Schema for RunRecord {
    const SCHEMA: &'static str = "phasewatt.run.v1";
}

impl Schema for SweepTable {
    const SCHEMA: &'static str = "phasewatt.sweep.v1";
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    schema: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct OwnedEnvelope<T> {
    schema: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Deserialize)]
struct SchemaOnly {
    schema: String,
}

pub fn to_json_string<T: Serialize + Schema>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(&Envelope {
        schema: T::SCHEMA,
        body: value,
    })
    .expect("report types serialize");
    s.push('\n');
    s
}

pub fn from_json_str<T: DeserializeOwned + Schema>(text: &str, path: &Path) -> Result<T, ReportError> {
    let parse = |e: serde_json::Error| ReportError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let tag: SchemaOnly = serde_json::from_str(text).map_err(parse)?;
    if tag.schema != T::SCHEMA {
        return Err(ReportError::SchemaMismatch {
            path: path.to_path_buf(),
            found: tag.schema,
            expected: T::SCHEMA.to_string(),
        });
    }
    let env: OwnedEnvelope<T> = serde_json::from_str(text).map_err(parse)?;
    debug_assert_eq!(env.schema, T::SCHEMA);
    Ok(env.body)
}

pub fn emit_json<T: Serialize + Schema>(value: &T, path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    fs::write(path, to_json_string(value)).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned + Schema>(path: impl AsRef<Path>) -> Result<T, ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    from_json_str(&text, path)
}

/// Writes `ledger.json`, `metrics.json` and `run.json` into `dir`.
pub fn write_run_outputs(dir: &Path, analysis: &Analysis, record: &RunRecord) -> Result<(), ReportError> {
    emit_json(&analysis.ledger, dir.join(LEDGER_FILE))?;
    emit_json(&analysis.metrics, dir.join(METRICS_FILE))?;
    emit_json(record, dir.join(RUN_FILE))
}

/// One sweep row: run labels then every scalar metric. Field order is the
/// CSV column order for this schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_bucket_min: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_bucket_max: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp_degree: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pp_degree: Option<u32>,
    pub truncated: bool,
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
    pub requests: u64,
    pub complete: u64,
    pub incomplete: u64,
    pub prompt_tokens: u64,
    pub generated_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_source: Option<String>,
}

/// A CSV cell before formatting.
enum Cell<'a> {
    Text(Option<&'a str>),
    Int(Option<u64>),
    Float(Option<f64>),
    Bool(bool),
}

impl Cell<'_> {
    fn render(&self) -> String {
        match self {
            Cell::Text(v) => v.unwrap_or("").to_string(),
            Cell::Int(v) => v.map(|n| n.to_string()).unwrap_or_default(),
            Cell::Float(v) => v.map(format_sig6).unwrap_or_default(),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

impl SweepRow {
    pub const COLUMNS: [&'static str; 36] = [
        "run_id",
        "model_name",
        "engine",
        "quantization",
        "batch_size",
        "context_bucket_min",
        "context_bucket_max",
        "tp_degree",
        "pp_degree",
        "truncated",
        "run_duration_s",
        "total_j",
        "prefill_j",
        "decode_j",
        "idle_j",
        "joules_per_generated_token",
        "prefill_joules_per_request",
        "prefill_joules_per_prompt_token",
        "joules_per_response",
        "mean_power_w",
        "peak_power_w",
        "energy_delay_product",
        "power_imbalance",
        "throughput_tokens_per_s",
        "ttft_ms",
        "total_kwh",
        "cost_usd",
        "co2_kg",
        "requests",
        "complete",
        "incomplete",
        "prompt_tokens",
        "generated_tokens",
        "phase_source",
        // Provenance columns keep a CSV copied on its own self-describing.
        "config_hash",
        "harness_version",
    ];

    pub fn from_metrics(m: &MetricsReport) -> Self {
        let run = &m.metadata.run;
        Self {
            run_id: m.run_id.clone(),
            model_name: run.model_name.clone(),
            engine: run.engine.clone(),
            quantization: run.quantization.clone(),
            batch_size: run.batch_size,
            context_bucket_min: run.context_bucket.map(|b| b[0]),
            context_bucket_max: run.context_bucket.map(|b| b[1]),
            tp_degree: run.tp_degree,
            pp_degree: run.pp_degree,
            truncated: run.truncated,
            run_duration_s: m.run_duration_s,
            total_j: m.total_j,
            prefill_j: m.prefill_j,
            decode_j: m.decode_j,
            idle_j: m.idle_j,
            joules_per_generated_token: m.joules_per_generated_token,
            prefill_joules_per_request: m.prefill_joules_per_request,
            prefill_joules_per_prompt_token: m.prefill_joules_per_prompt_token,
            joules_per_response: m.joules_per_response,
            mean_power_w: m.mean_power_w,
            peak_power_w: m.peak_power_w,
            energy_delay_product: m.energy_delay_product,
            power_imbalance: m.power_imbalance,
            throughput_tokens_per_s: m.throughput_tokens_per_s,
            ttft_ms: m.ttft_ms,
            total_kwh: m.total_kwh,
            cost_usd: m.cost_usd,
            co2_kg: m.co2_kg,
            requests: m.counts.requests,
            complete: m.counts.complete,
            incomplete: m.counts.incomplete,
            prompt_tokens: m.counts.prompt_tokens,
            generated_tokens: m.counts.generated_tokens,
            phase_source: m.metadata.phase_source.clone(),
        }
    }

    fn cells<'a>(&'a self, config_hash: Option<&'a str>, version: &'a str) -> Vec<Cell<'a>> {
        use Cell::*;
        vec![
            Text(Some(&self.run_id)),
            Text(self.model_name.as_deref()),
            Text(self.engine.as_deref()),
            Text(self.quantization.as_deref()),
            Int(self.batch_size),
            Int(self.context_bucket_min),
            Int(self.context_bucket_max),
            Int(self.tp_degree.map(u64::from)),
            Int(self.pp_degree.map(u64::from)),
            Bool(self.truncated),
            Float(Some(self.run_duration_s)),
            Float(Some(self.total_j)),
            Float(Some(self.prefill_j)),
            Float(Some(self.decode_j)),
            Float(Some(self.idle_j)),
            Float(self.joules_per_generated_token),
            Float(self.prefill_joules_per_request),
            Float(self.prefill_joules_per_prompt_token),
            Float(self.joules_per_response),
            Float(Some(self.mean_power_w)),
            Float(Some(self.peak_power_w)),
            Float(Some(self.energy_delay_product)),
            Float(self.power_imbalance),
            Float(Some(self.throughput_tokens_per_s)),
            Float(self.ttft_ms),
            Float(Some(self.total_kwh)),
            Float(self.cost_usd),
            Float(self.co2_kg),
            Int(Some(self.requests)),
            Int(Some(self.complete)),
            Int(Some(self.incomplete)),
            Int(Some(self.prompt_tokens)),
            Int(Some(self.generated_tokens)),
            Text(self.phase_source.as_deref()),
            Text(config_hash),
            Text(Some(version)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub harness_version: String,
    pub conventions: Conventions,
    /// run_id → hash of the run's resolved config.
    pub config_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub columns: Vec<String>,
    /// Sorted by run_id.
    pub rows: Vec<SweepRow>,
    pub provenance: Provenance,
}

impl SweepTable {
    /// Builds a table from per-run metrics; rows are sorted by run_id.
    pub fn from_metrics(reports: &[MetricsReport]) -> Result<Self, ReportError> {
        let first = reports.first().ok_or(ReportError::EmptyTable)?;
        let conventions = first.metadata.conventions.clone();
        for m in reports {
            if m.metadata.conventions != conventions {
                return Err(ReportError::ConventionMismatch {
                    first: first.run_id.clone(),
                    other: m.run_id.clone(),
                });
            }
        }
        let mut rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_metrics).collect();
        rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(Self {
            columns: SweepRow::COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows,
            provenance: Provenance {
                harness_version: crate::HARNESS_VERSION.to_string(),
                conventions,
                config_hashes: reports
                    .iter()
                    .filter_map(|m| Some((m.run_id.clone(), m.metadata.run.config_hash.clone()?)))
                    .collect(),
            },
        })
    }
}

/// Reads `metrics.json` from each run directory and tabulates them.
pub fn aggregate_runs<P: AsRef<Path>>(artifact_dirs: &[P]) -> Result<SweepTable, ReportError> {
    let reports = artifact_dirs
        .iter()
        .map(|dir| read_artifact::<MetricsReport>(dir.as_ref(), METRICS_FILE))
        .collect::<Result<Vec<_>, _>>()?;
    SweepTable::from_metrics(&reports)
}

/// Reads `ledger.json` from each run directory.
pub fn collect_ledgers<P: AsRef<Path>>(artifact_dirs: &[P]) -> Result<Vec<EnergyLedger>, ReportError> {
    artifact_dirs
        .iter()
        .map(|dir| read_artifact(dir.as_ref(), LEDGER_FILE))
        .collect()
}

fn read_artifact<T: DeserializeOwned + Schema>(dir: &Path, file: &'static str) -> Result<T, ReportError> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(ReportError::MissingArtifact {
            dir: dir.to_path_buf(),
            file,
        });
    }
    read_json(path)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, ReportError> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |e| ReportError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    }
}

/// Header plus one row per run. Floats carry six significant digits.
pub fn emit_csv(table: &SweepTable, path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    if table.rows.is_empty() {
        return Err(ReportError::EmptyTable);
    }
    let mut w = csv_writer(path)?;
    w.write_record(SweepRow::COLUMNS).map_err(csv_err(path))?;
    for row in &table.rows {
        let hash = table.provenance.config_hashes.get(&row.run_id).map(String::as_str);
        let cells = row.cells(hash, &table.provenance.harness_version);
        w.write_record(cells.iter().map(Cell::render)).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Long-format `run_id,source_id,domain,phase,joules` rows for plotting.
pub fn emit_breakdown_csv(ledgers: &[EnergyLedger], path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    let mut sorted: Vec<&EnergyLedger> = ledgers.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut w = csv_writer(path)?;
    w.write_record(["run_id", "source_id", "domain", "phase", "joules"])
        .map_err(csv_err(path))?;
    for l in sorted {
        for (source, cells) in &l.by_source_phase {
            let domain = l.source_domains.get(source).map(|d| d.as_str()).unwrap_or("");
            for phase in Phase::ALL {
                let j = format_sig6(cells.get(phase));
                w.write_record([&l.run_id, source, domain, &phase.to_string(), &j])
                    .map_err(csv_err(path))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// `%g`-style formatting with six significant digits: fixed notation for
/// decimal exponents in [-5, 6), scientific otherwise, trailing zeros trimmed.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes `sweep.csv`, `sweep.json` and `energy_breakdown.csv` for the given
/// run directories into `out`.
pub fn write_sweep_report<P: AsRef<Path>>(artifact_dirs: &[P], out: &Path) -> Result<SweepTable, ReportError> {
    let table = aggregate_runs(artifact_dirs)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    emit_csv(&table, out.join(SWEEP_CSV_FILE))?;
    emit_json(&table, out.join(SWEEP_JSON_FILE))?;
    let ledgers = collect_ledgers(artifact_dirs)?;
    emit_breakdown_csv(&ledgers, out.join(BREAKDOWN_CSV_FILE))?;
    Ok(table)
}
