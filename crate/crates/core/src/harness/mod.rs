//! Experiment orchestration: proxy training, the answer-only probe, shot
//! selection, prompt assembly, test-set querying, sweeps and reports.

mod config;
mod experiment;
mod report;
mod sweep;
pub mod synth;

use thiserror::Error;

pub use config::{ExperimentConfig, LlmSpec};
pub use experiment::{
    build_client, eval_proxy, initial_proxy, query_all, resolve_template, run_experiment,
    task_vocab, train_proxy, EvalReport, ExperimentOutcome, PredictionRecord, ProbeSummary,
    RunStats, Runner, ShotAttribution, ShotPlan,
};
pub use report::{
    parse_csv, render_csv, render_proxy_table, render_report, render_text, ProxyEvalRow,
    ReportFormat, ReportRow, COLUMNS,
};
pub use sweep::{run_sweep, SweepAxis, SweepCell, SweepTable};
pub use synth::{gates_for_task, make_synthetic_task, Lexicon, SyntheticSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("chain-of-thought mode needs train examples with human rationales")]
    MissingRationales,
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Proxy(#[from] crate::proxy::ProxyError),
    #[error(transparent)]
    Selection(#[from] crate::selection::SelectionError),
    #[error(transparent)]
    Prompt(#[from] crate::prompting::PromptError),
    #[error(transparent)]
    Llm(#[from] crate::llmclient::LlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
