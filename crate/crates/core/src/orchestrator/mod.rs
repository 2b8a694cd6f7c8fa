//! Configuration, prompt datasets and live run execution.

mod config;
mod dataset;
mod run;

pub use config::{
    expand_sweep, parse_config, parse_config_str, AxisValue, ConfigError, DatasetSpec,
    ParsedConfig, RunConfig, SweepPlan, AXIS_ORDER, DEFAULT_INTERVAL_MS,
};
pub use dataset::{
    bucket_prompts, load_prompts, write_prompts_jsonl, Bucketed, CommandCounter, DatasetError,
    PromptFormat, TokenCounter, WhitespaceCounter,
};
pub use run::{
    execute_run, execute_sweep, expand_command, RunArtifacts, RunError, RunOptions, ENV_BATCH_SIZE,
    ENV_ENGINE, ENV_EVENT_ENDPOINT, ENV_MAX_REQUESTS, ENV_MODEL, ENV_PP, ENV_PROMPTS_FILE,
    ENV_QUANT, ENV_RUN_ID, ENV_TP, PROMPTS_FILE, WORKLOAD_LOG,
};
