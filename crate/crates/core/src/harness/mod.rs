//! Experiment orchestration: config loading, response caching, transcript
//! persistence, resumable execution with bounded concurrency, and the
//! end-to-end pipeline from dataset to report.

mod cache;
mod config;
mod manifest;
mod replay;
mod run;
mod transcripts;

use thiserror::Error;

pub use cache::{cached_invoke, CacheKey, CachedInvoker, ResponseCache};
pub use config::{DatasetConfig, DebateSettings, ExperimentConfig, RunSettings};
pub use manifest::{RunManifest, TaskStatus};
pub use replay::{replay_check, ReplaySummary};
pub use run::{run_experiment, ExperimentOutput, RunOptions, RunStats};
pub use transcripts::{
    load_replay_store, persist_transcript, read_transcript, read_transcripts, RunRecord, Scope,
    TranscriptLine,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tabular(#[from] crate::tabular::TabularError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error(transparent)]
    Fairness(#[from] crate::fairness::FairnessError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to persist {path}: {source}")]
    Persist {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("malformed transcript {path}: {message}")]
    Transcript { path: String, message: String },
    #[error("replay divergence for instance {instance_id} ({path}): {detail}")]
    Divergence {
        instance_id: u64,
        path: String,
        detail: String,
    },
    #[error("rebuilt {path} differs from the stored file")]
    ReportDivergence { path: String },
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `contents` to a sibling temp file and renames it into place, so
/// readers never observe a partially written file.
pub(crate) fn write_atomic(path: &std::path::Path, contents: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
