use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}{}: {detail}", line.map(|l| format!(": line {l}")).unwrap_or_default())]
    ParseError {
        path: PathBuf,
        line: Option<usize>,
        detail: String,
    },
    #[error("{path}: no `{column}` column")]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("buckets [{}, {}) and [{}, {}) overlap", .a.0, .a.1, .b.0, .b.1)]
    OverlappingBuckets { a: (u64, u64), b: (u64, u64) },
    #[error("bucket [{}, {}) is empty", .0.0, .0.1)]
    EmptyBucket((u64, u64)),
    #[error("token counter failed: {0}")]
    Counter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    Csv,
    Json,
    Jsonl,
}

impl PromptFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

fn prompt_of(value: serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s),
        serde_json::Value::Object(mut map) => match map.remove("prompt")? {
            serde_json::Value::String(s) => Some(s),
            _ => None,
        },
        _ => None,
    }
}

/// Loads prompts in file order. CSV needs a `prompt` column; JSON is an
/// array of strings or of objects with a `prompt` string; JSONL holds one
/// such element per line.
pub fn load_prompts(path: &Path, format: PromptFormat) -> Result<Vec<String>, DatasetError> {
    let parse_err = |line: Option<usize>, detail: String| DatasetError::ParseError {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        PromptFormat::Csv => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader.headers().map_err(|e| parse_err(Some(1), e.to_string()))?;
            let col = headers
                .iter()
                .position(|h| h.trim() == "prompt")
                .ok_or(DatasetError::MissingColumn {
                    path: path.to_path_buf(),
                    column: "prompt",
                })?;
            reader
                .records()
                .enumerate()
                .map(|(i, rec)| {
                    let rec = rec.map_err(|e| parse_err(Some(i + 2), e.to_string()))?;
                    Ok(rec.get(col).unwrap_or("").to_string())
                })
                .collect()
        }
        PromptFormat::Json => {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| parse_err(Some(e.line()), e.to_string()))?;
            let serde_json::Value::Array(items) = value else {
                return Err(parse_err(None, "expected a JSON array".into()));
            };
            items
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    prompt_of(v).ok_or_else(|| {
                        parse_err(None, format!("element {i} is not a string or {{\"prompt\": ...}}"))
                    })
                })
                .collect()
        }
        PromptFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let v = serde_json::from_str(line).map_err(|e| parse_err(Some(i + 1), e.to_string()))?;
                prompt_of(v).ok_or_else(|| parse_err(Some(i + 1), "not a string or {\"prompt\": ...}".into()))
            })
            .collect(),
    }
}

/// Writes prompts as JSONL strings, the format workloads receive.
pub fn write_prompts_jsonl(prompts: &[String], path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for p in prompts {
        let line = serde_json::to_string(p).expect("strings serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub trait TokenCounter {
    fn count(&self, prompt: &str) -> Result<u64, DatasetError>;
}

/// Whitespace-separated words; close enough for buckets thousands of tokens
/// wide.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, prompt: &str) -> Result<u64, DatasetError> {
        Ok(prompt.split_whitespace().count() as u64)
    }
}

/// Runs `sh -c <command>` with the prompt on stdin; stdout must be an integer.
#[derive(Debug, Clone)]
pub struct CommandCounter {
    pub command: String,
}

impl TokenCounter for CommandCounter {
    fn count(&self, prompt: &str) -> Result<u64, DatasetError> {
        let fail = |d: String| DatasetError::Counter(format!("{}: {d}", self.command));
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin.write_all(prompt.as_bytes()).map_err(|e| fail(e.to_string()))?;
        }
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim().parse().map_err(|_| fail(format!("non-integer output {:?}", text.trim())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucketed {
    /// Half-open `[min, max)` bucket → prompts in dataset order.
    pub buckets: BTreeMap<(u64, u64), Vec<String>>,
    /// Prompts outside every bucket.
    pub dropped: usize,
}

/// Assigns each prompt to the unique half-open bucket containing its token
/// count.
pub fn bucket_prompts(
    prompts: &[String],
    buckets: &[(u64, u64)],
    counter: &dyn TokenCounter,
) -> Result<Bucketed, DatasetError> {
    if prompts.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    for (i, &a) in buckets.iter().enumerate() {
        if a.0 >= a.1 {
            return Err(DatasetError::EmptyBucket(a));
        }
        for &b in &buckets[i + 1..] {
            if a.0 < b.1 && b.0 < a.1 {
                return Err(DatasetError::OverlappingBuckets { a, b });
            }
        }
    }
    let mut out = Bucketed {
        buckets: buckets.iter().map(|b| (*b, Vec::new())).collect(),
        dropped: 0,
    };
    for p in prompts {
        let n = counter.count(p)?;
        match buckets.iter().find(|(lo, hi)| *lo <= n && n < *hi) {
            Some(b) => out.buckets.get_mut(b).expect("bucket present").push(p.clone()),
            None => out.dropped += 1,
        }
    }
    Ok(out)
}
