//! Run and sweep configuration files (TOML).
//!
//! A file has one `[run]` table, optional `[run.dataset]`, one or more
//! `[[run.sources]]` and an optional `[sweep]` table whose keys are axis
//! names mapping to value lists. Unknown keys anywhere are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::dataset::PromptFormat;
use crate::metrics::RunMetadata;
use crate::phase::Endpoint;
use crate::sampler::{Backend, Domain, SourceSpec};

pub const DEFAULT_INTERVAL_MS: u64 = 100;

/// Axis expansion order; the last axis varies fastest.
pub const AXIS_ORDER: [&str; 6] = [
    "model_name",
    "engine",
    "quantization",
    "batch_size",
    "context_bucket",
    "tp_pp",
];

/// Source parameters holding filesystem paths, resolved against the config
/// file's directory.
const PATH_PARAMS: [&str; 3] = ["path", "max_path", "milliwatts_file"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("missing required key `{key}`")]
    MissingRequired { key: String },
    #[error("bad value for `{key}`: {detail}")]
    BadValue { key: String, detail: String },
}

fn bad(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub format: PromptFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counter_cmd: Option<String>,
}

/// A fully validated single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub workload_cmd: String,
    pub model_name: Option<String>,
    pub engine: Option<String>,
    pub dataset: Option<DatasetSpec>,
    pub batch_size: u64,
    /// Half-open prompt-length bucket `[min, max)` in tokens.
    pub context_bucket: Option<[u64; 2]>,
    pub quantization: Option<String>,
    pub tp_degree: u32,
    pub pp_degree: u32,
    pub sources: Vec<SourceSpec>,
    pub interval_ms: u64,
    pub price_usd_per_kwh: Option<f64>,
    pub kg_co2_per_kwh: Option<f64>,
    pub max_requests: Option<u64>,
    pub max_duration_s: Option<f64>,
    pub event_endpoint: Option<String>,
}

impl RunConfig {
    /// Hex SHA-256 of the config's canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            run_id: self.run_id.clone(),
            model_name: self.model_name.clone(),
            engine: self.engine.clone(),
            batch_size: Some(self.batch_size),
            context_bucket: self.context_bucket,
            quantization: self.quantization.clone(),
            tp_degree: Some(self.tp_degree),
            pp_degree: Some(self.pp_degree),
            interval_ms: Some(self.interval_ms),
            price_usd_per_kwh: self.price_usd_per_kwh,
            kg_co2_per_kwh: self.kg_co2_per_kwh,
            config_hash: Some(self.config_hash()),
            truncated: false,
        }
    }

    pub fn endpoint(&self) -> Result<Endpoint, ConfigError> {
        match &self.event_endpoint {
            None => Ok(Endpoint::loopback()),
            Some(text) => text.parse().map_err(|e: String| bad("run.event_endpoint", e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Int(u64),
    Pair([u64; 2]),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPlan {
    pub base: RunConfig,
    pub axes: BTreeMap<String, Vec<AxisValue>>,
    pub runs: Vec<RunConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedConfig {
    Run(Box<RunConfig>),
    Sweep(Box<SweepPlan>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    run: RawRun,
    sweep: Option<RawSweep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    run_id: String,
    workload_cmd: String,
    model_name: Option<String>,
    engine: Option<String>,
    batch_size: Option<i64>,
    context_bucket: Option<Vec<i64>>,
    quantization: Option<String>,
    tp_degree: Option<i64>,
    pp_degree: Option<i64>,
    interval_ms: Option<i64>,
    price_usd_per_kwh: Option<f64>,
    kg_co2_per_kwh: Option<f64>,
    max_requests: Option<i64>,
    max_duration_s: Option<f64>,
    event_endpoint: Option<String>,
    dataset: Option<RawDataset>,
    #[serde(default)]
    sources: Vec<RawSource>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    path: PathBuf,
    format: Option<PromptFormat>,
    token_counter_cmd: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    source_id: String,
    domain: String,
    backend: String,
    #[serde(default)]
    params: BTreeMap<String, toml::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    model_name: Option<Vec<String>>,
    engine: Option<Vec<String>>,
    quantization: Option<Vec<String>>,
    batch_size: Option<Vec<i64>>,
    context_bucket: Option<Vec<Vec<i64>>>,
    tp_pp: Option<Vec<Vec<i64>>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn backticked(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

fn map_toml_error(text: &str, err: toml::de::Error) -> ConfigError {
    let message = err.message().trim().to_string();
    let line = err.span().map_or(1, |s| line_of(text, s.start));
    if message.starts_with("unknown field") {
        if let Some(key) = backticked(&message) {
            return ConfigError::UnknownKey {
                key: key.to_string(),
                line,
            };
        }
    }
    if message.starts_with("missing field") {
        if let Some(key) = backticked(&message) {
            return ConfigError::MissingRequired { key: key.to_string() };
        }
    }
    if message.starts_with("invalid type") || message.starts_with("invalid value") {
        let key = err
            .span()
            .and_then(|s| text.lines().nth(line_of(text, s.start) - 1))
            .and_then(|l| l.split_once('='))
            .map(|(k, _)| k.trim().to_string())
            .unwrap_or_default();
        return ConfigError::BadValue {
            key,
            detail: format!("line {line}: {message}"),
        };
    }
    ConfigError::ParseError { line, message }
}

fn positive(key: &str, v: Option<i64>, default: u64) -> Result<u64, ConfigError> {
    match v {
        None => Ok(default),
        Some(n) if n >= 1 => Ok(n as u64),
        Some(n) => Err(bad(key, format!("must be >= 1, got {n}"))),
    }
}

fn rate(key: &str, v: Option<f64>) -> Result<Option<f64>, ConfigError> {
    match v {
        Some(r) if !(r.is_finite() && r >= 0.0) => Err(bad(key, format!("must be >= 0, got {r}"))),
        _ => Ok(v),
    }
}

fn bucket(key: &str, v: &[i64]) -> Result<[u64; 2], ConfigError> {
    match *v {
        [lo, hi] if lo >= 0 && lo < hi => Ok([lo as u64, hi as u64]),
        _ => Err(bad(key, format!("expected [min, max] with 0 <= min < max, got {v:?}"))),
    }
}

fn parse_domain(s: &str) -> Option<Domain> {
    Some(match s.to_ascii_lowercase().as_str() {
        "gpu" => Domain::Gpu,
        "cpu" => Domain::Cpu,
        "dram" => Domain::Dram,
        "node" => Domain::Node,
        "other" => Domain::Other,
        _ => return None,
    })
}

fn parse_backend(s: &str) -> Option<Backend> {
    let norm: String = s
        .chars()
        .filter(|c| *c != '_' && *c != '-')
        .collect::<String>()
        .to_ascii_lowercase();
    Some(match norm.as_str() {
        "energycounterfile" => Backend::EnergyCounterFile,
        "gputelemetry" => Backend::GpuTelemetry,
        "baseboardpoll" => Backend::BaseboardPoll,
        "tracereplay" => Backend::TraceReplay,
        "synthetic" => Backend::Synthetic,
        _ => return None,
    })
}

fn source_spec(raw: RawSource, base_dir: &Path) -> Result<SourceSpec, ConfigError> {
    let key = format!("run.sources.{}", raw.source_id);
    let domain = parse_domain(&raw.domain)
        .ok_or_else(|| bad(&format!("{key}.domain"), format!("unknown domain {:?}", raw.domain)))?;
    let backend = parse_backend(&raw.backend)
        .ok_or_else(|| bad(&format!("{key}.backend"), format!("unknown backend {:?}", raw.backend)))?;
    let mut spec = SourceSpec::new(raw.source_id.clone(), domain, backend);
    for (k, v) in raw.params {
        let text = match v {
            toml::Value::String(s) if PATH_PARAMS.contains(&k.as_str()) => {
                base_dir.join(s).display().to_string()
            }
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(bad(
                    &format!("{key}.params.{k}"),
                    format!("expected a scalar, got {}", other.type_str()),
                ))
            }
        };
        spec = spec.with_param(&k, text);
    }
    Ok(spec)
}

fn run_config(raw: RawRun, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    if raw.run_id.trim().is_empty() {
        return Err(bad("run.run_id", "must not be empty"));
    }
    if raw.workload_cmd.trim().is_empty() {
        return Err(bad("run.workload_cmd", "must not be empty"));
    }
    if raw.sources.is_empty() {
        return Err(ConfigError::MissingRequired {
            key: "run.sources".into(),
        });
    }
    let sources = raw
        .sources
        .into_iter()
        .map(|s| source_spec(s, base_dir))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, s) in sources.iter().enumerate() {
        if sources[..i].iter().any(|o| o.source_id == s.source_id) {
            return Err(bad("run.sources", format!("duplicate source_id {:?}", s.source_id)));
        }
    }
    if sources.iter().filter(|s| s.domain == Domain::Node).count() > 1 {
        return Err(bad("run.sources", "at most one NODE source"));
    }
    let dataset = raw
        .dataset
        .map(|d| {
            let path = base_dir.join(&d.path);
            let format = match d.format {
                Some(f) => f,
                None => PromptFormat::from_extension(&path).ok_or_else(|| {
                    bad("run.dataset.format", format!("cannot infer from {}", path.display()))
                })?,
            };
            Ok::<_, ConfigError>(DatasetSpec {
                path,
                format,
                token_counter_cmd: d.token_counter_cmd,
            })
        })
        .transpose()?;
    let max_duration_s = match raw.max_duration_s {
        Some(d) if !(d.is_finite() && d > 0.0) => {
            return Err(bad("run.max_duration_s", format!("must be > 0, got {d}")))
        }
        d => d,
    };
    let config = RunConfig {
        run_id: raw.run_id,
        workload_cmd: raw.workload_cmd,
        model_name: raw.model_name,
        engine: raw.engine,
        dataset,
        batch_size: positive("run.batch_size", raw.batch_size, 1)?,
        context_bucket: raw
            .context_bucket
            .map(|b| bucket("run.context_bucket", &b))
            .transpose()?,
        quantization: raw.quantization,
        tp_degree: positive("run.tp_degree", raw.tp_degree, 1)? as u32,
        pp_degree: positive("run.pp_degree", raw.pp_degree, 1)? as u32,
        sources,
        interval_ms: positive("run.interval_ms", raw.interval_ms, DEFAULT_INTERVAL_MS)?,
        price_usd_per_kwh: rate("run.price_usd_per_kwh", raw.price_usd_per_kwh)?,
        kg_co2_per_kwh: rate("run.kg_co2_per_kwh", raw.kg_co2_per_kwh)?,
        max_requests: raw
            .max_requests
            .map(|n| positive("run.max_requests", Some(n), 0))
            .transpose()?,
        max_duration_s,
        event_endpoint: raw.event_endpoint,
    };
    config.endpoint()?;
    Ok(config)
}

fn sanitize_id(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn non_empty<T>(key: &str, v: Option<Vec<T>>) -> Result<Option<Vec<T>>, ConfigError> {
    match v {
        Some(v) if v.is_empty() => Err(bad(key, "axis has no values")),
        v => Ok(v),
    }
}

fn axes(raw: RawSweep) -> Result<BTreeMap<String, Vec<AxisValue>>, ConfigError> {
    let mut out = BTreeMap::new();
    let labels = |v: Vec<String>| v.into_iter().map(AxisValue::Label).collect::<Vec<_>>();
    if let Some(v) = non_empty("sweep.model_name", raw.model_name)? {
        out.insert("model_name".to_string(), labels(v));
    }
    if let Some(v) = non_empty("sweep.engine", raw.engine)? {
        out.insert("engine".to_string(), labels(v));
    }
    if let Some(v) = non_empty("sweep.quantization", raw.quantization)? {
        out.insert("quantization".to_string(), labels(v));
    }
    if let Some(v) = non_empty("sweep.batch_size", raw.batch_size)? {
        let vals = v
            .into_iter()
            .map(|n| positive("sweep.batch_size", Some(n), 0).map(AxisValue::Int))
            .collect::<Result<_, _>>()?;
        out.insert("batch_size".to_string(), vals);
    }
    if let Some(v) = non_empty("sweep.context_bucket", raw.context_bucket)? {
        let vals = v
            .iter()
            .map(|b| bucket("sweep.context_bucket", b).map(AxisValue::Pair))
            .collect::<Result<_, _>>()?;
        out.insert("context_bucket".to_string(), vals);
    }
    if let Some(v) = non_empty("sweep.tp_pp", raw.tp_pp)? {
        let vals = v
            .iter()
            .map(|p| match **p {
                [tp, pp] if tp >= 1 && pp >= 1 => Ok(AxisValue::Pair([tp as u64, pp as u64])),
                _ => Err(bad("sweep.tp_pp", format!("expected [tp, pp] with both >= 1, got {p:?}"))),
            })
            .collect::<Result<_, _>>()?;
        out.insert("tp_pp".to_string(), vals);
    }
    Ok(out)
}

fn apply_axis(config: &mut RunConfig, axis: &str, value: &AxisValue) -> String {
    match (axis, value) {
        ("model_name", AxisValue::Label(s)) => {
            config.model_name = Some(s.clone());
            format!("-{s}")
        }
        ("engine", AxisValue::Label(s)) => {
            config.engine = Some(s.clone());
            format!("-{s}")
        }
        ("quantization", AxisValue::Label(s)) => {
            config.quantization = Some(s.clone());
            format!("-{s}")
        }
        ("batch_size", AxisValue::Int(n)) => {
            config.batch_size = *n;
            format!("-bs{n}")
        }
        ("context_bucket", AxisValue::Pair([lo, hi])) => {
            config.context_bucket = Some([*lo, *hi]);
            format!("-ctx{lo}-{hi}")
        }
        ("tp_pp", AxisValue::Pair([tp, pp])) => {
            config.tp_degree = *tp as u32;
            config.pp_degree = *pp as u32;
            format!("-tp{tp}pp{pp}")
        }
        _ => unreachable!("axis {axis} built with a mismatched value"),
    }
}

/// Cartesian product of `axes` over `base`, in [`AXIS_ORDER`].
pub fn expand_sweep(
    base: &RunConfig,
    axes: &BTreeMap<String, Vec<AxisValue>>,
) -> Result<Vec<RunConfig>, ConfigError> {
    let order: Vec<(&str, &Vec<AxisValue>)> = AXIS_ORDER
        .iter()
        .filter_map(|name| axes.get(*name).map(|v| (*name, v)))
        .collect();
    let total: usize = order.iter().map(|(_, v)| v.len()).product();
    let mut runs = Vec::with_capacity(total);
    for mut index in 0..total {
        let mut picks = vec![0usize; order.len()];
        for (k, (_, vals)) in order.iter().enumerate().rev() {
            picks[k] = index % vals.len();
            index /= vals.len();
        }
        let mut config = base.clone();
        let mut suffix = String::new();
        for (k, (name, vals)) in order.iter().enumerate() {
            suffix.push_str(&apply_axis(&mut config, name, &vals[picks[k]]));
        }
        config.run_id = sanitize_id(&format!("{}{suffix}", base.run_id));
        if runs.iter().any(|r: &RunConfig| r.run_id == config.run_id) {
            return Err(bad("sweep", format!("axis values collide on run id {:?}", config.run_id)));
        }
        runs.push(config);
    }
    Ok(runs)
}

/// Parses `text` as if read from a file in `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ParsedConfig, ConfigError> {
    let raw: RawFile = toml::from_str(text).map_err(|e| map_toml_error(text, e))?;
    let base = run_config(raw.run, base_dir)?;
    let Some(sweep) = raw.sweep else {
        return Ok(ParsedConfig::Run(Box::new(base)));
    };
    let axes = axes(sweep)?;
    if axes.is_empty() {
        return Err(bad("sweep", "no axes given"));
    }
    if base.max_requests.is_none() && base.max_duration_s.is_none() {
        return Err(ConfigError::MissingRequired {
            key: "run.max_requests or run.max_duration_s".into(),
        });
    }
    let runs = expand_sweep(&base, &axes)?;
    Ok(ParsedConfig::Sweep(Box::new(SweepPlan { base, axes, runs })))
}

pub fn parse_config(path: &Path) -> Result<ParsedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
        _ => ConfigError::Io {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
[run]
run_id = "smoke"
workload_cmd = "true"

[[run.sources]]
source_id = "gpu0"
domain = "GPU"
backend = "synthetic"
params = { watts = 250 }
"#;

    fn parse(text: &str) -> Result<ParsedConfig, ConfigError> {
        parse_config_str(text, Path::new("/cfg"))
    }

    fn run(text: &str) -> RunConfig {
        match parse(text).unwrap() {
            ParsedConfig::Run(r) => *r,
            ParsedConfig::Sweep(_) => panic!("expected a single run"),
        }
    }

    fn sweep(text: &str) -> SweepPlan {
        match parse(text).unwrap() {
            ParsedConfig::Sweep(s) => *s,
            ParsedConfig::Run(_) => panic!("expected a sweep"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = run(MINIMAL);
        assert_eq!(c.interval_ms, 100);
        assert_eq!((c.batch_size, c.tp_degree, c.pp_degree), (1, 1, 1));
        assert_eq!(c.sources[0].domain, Domain::Gpu);
        assert_eq!(c.sources[0].backend, Backend::Synthetic);
        assert_eq!(c.sources[0].param("watts"), Some("250"));
        assert_eq!(c.endpoint().unwrap(), Endpoint::loopback());
    }

    #[test]
    fn batch_by_quantization_sweep_has_six_runs() {
        let text = format!(
            "{MINIMAL}\n[sweep]\nbatch_size = [32, 256, 1024]\nquantization = [\"fp16\", \"fp8\"]\n"
        )
        .replace("[run]\n", "[run]\nmax_requests = 4\n");
        let s = sweep(&text);
        let ids: Vec<&str> = s.runs.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "smoke-fp16-bs32",
                "smoke-fp16-bs256",
                "smoke-fp16-bs1024",
                "smoke-fp8-bs32",
                "smoke-fp8-bs256",
                "smoke-fp8-bs1024"
            ]
        );
        assert_eq!(s.runs[4].batch_size, 256);
        assert_eq!(s.runs[4].quantization.as_deref(), Some("fp8"));
        assert_eq!(s, sweep(&text));
    }

    #[test]
    fn sweep_needs_a_stop_condition() {
        let text = format!("{MINIMAL}\n[sweep]\nbatch_size = [1, 2]\n");
        assert!(matches!(parse(&text), Err(ConfigError::MissingRequired { .. })));
    }

    #[test]
    fn negative_interval_is_bad_value() {
        let text = MINIMAL.replace("[run]\n", "[run]\ninterval_ms = -5\n");
        match parse(&text) {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "run.interval_ms"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = MINIMAL.replace("[run]\n", "[run]\nbatchsize = 4\n");
        match parse(&text) {
            Err(ConfigError::UnknownKey { key, line }) => {
                assert_eq!(key, "batchsize");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_malformed() {
        let text = MINIMAL.replace("workload_cmd = \"true\"\n", "");
        match parse(&text) {
            Err(ConfigError::MissingRequired { key }) => assert_eq!(key, "workload_cmd"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse("[run\nrun_id = 1"),
            Err(ConfigError::ParseError { line: 1, .. })
        ));
        let text = MINIMAL.replace("[run]\n", "[run]\nbatch_size = \"big\"\n");
        assert!(matches!(parse(&text), Err(ConfigError::BadValue { key, .. }) if key == "batch_size"));
    }

    #[test]
    fn invariants_are_enforced() {
        for (patch, key) in [
            ("batch_size = 0", "run.batch_size"),
            ("context_bucket = [5000, 2000]", "run.context_bucket"),
            ("price_usd_per_kwh = -0.1", "run.price_usd_per_kwh"),
            ("event_endpoint = \"http://x\"", "run.event_endpoint"),
        ] {
            let text = MINIMAL.replace("[run]\n", &format!("[run]\n{patch}\n"));
            match parse(&text) {
                Err(ConfigError::BadValue { key: k, .. }) => assert_eq!(k, key, "{patch}"),
                other => panic!("{patch}: {other:?}"),
            }
        }
        let no_sources = "[run]\nrun_id = \"a\"\nworkload_cmd = \"true\"\n";
        assert!(matches!(parse(no_sources), Err(ConfigError::MissingRequired { .. })));
        let dup = format!("{MINIMAL}{}", &MINIMAL[MINIMAL.find("[[run.sources]]").unwrap()..]);
        assert!(matches!(parse(&dup), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn dataset_and_source_paths_resolve_against_config_dir() {
        let text = format!(
            "{MINIMAL}\n[run.dataset]\npath = \"prompts.csv\"\n\n[[run.sources]]\nsource_id = \"cpu\"\ndomain = \"cpu\"\nbackend = \"energy_counter_file\"\nparams = {{ path = \"rapl/energy_uj\" }}\n"
        );
        let c = run(&text);
        let d = c.dataset.unwrap();
        assert_eq!(d.path, Path::new("/cfg/prompts.csv"));
        assert_eq!(d.format, PromptFormat::Csv);
        assert_eq!(c.sources[1].param("path"), Some("/cfg/rapl/energy_uj"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = run(MINIMAL);
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.batch_size = 2;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
        assert_eq!(a.metadata().config_hash, Some(a.config_hash()));
    }

    #[test]
    fn colliding_run_ids_are_rejected() {
        let text = format!("{MINIMAL}\n[sweep]\nquantization = [\"a b\", \"a_b\"]\n")
            .replace("[run]\n", "[run]\nmax_requests = 1\n");
        assert!(matches!(parse(&text), Err(ConfigError::BadValue { .. })));
    }

    proptest! {
        #[test]
        fn run_count_is_the_axis_product(nb in 1usize..5, nq in 1usize..4, nc in 1usize..3) {
            let mut base = run(MINIMAL);
            base.max_requests = Some(1);
            let mut axes = BTreeMap::new();
            axes.insert("batch_size".to_string(), (1..=nb as u64).map(AxisValue::Int).collect());
            axes.insert("quantization".to_string(), (0..nq).map(|i| AxisValue::Label(format!("q{i}"))).collect());
            axes.insert(
                "context_bucket".to_string(),
                (0..nc as u64).map(|i| AxisValue::Pair([i * 10, i * 10 + 10])).collect(),
            );
            let runs = expand_sweep(&base, &axes).unwrap();
            prop_assert_eq!(runs.len(), nb * nq * nc);
            let mut ids: Vec<_> = runs.iter().map(|r| r.run_id.clone()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), runs.len());
        }
    }
}
