use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::run::{evaluate_records, prepare_data};
use super::transcripts::{read_transcripts, RunRecord, TRANSCRIPT_DIR};
use super::HarnessError;
use crate::agents::parse_response;
use crate::analysis::{build_report, write_report};
use crate::debate::final_decision;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplaySummary {
    pub transcripts: usize,
    pub messages: usize,
    /// Report files compared byte-for-byte (empty without a config).
    pub files_compared: Vec<PathBuf>,
}

fn diverged(path: &Path, record: &RunRecord, detail: String) -> HarnessError {
    HarnessError::Divergence {
        instance_id: record.instance_id,
        path: path.display().to_string(),
        detail,
    }
}

/// Re-parses every stored raw response, recomputes every outcome, and
/// checks both against what the transcript recorded.
fn check_record(path: &Path, record: &RunRecord) -> Result<(), HarnessError> {
    for m in &record.messages {
        let at = format!("{} round {}", m.agent_id, m.round);
        let parsed = parse_response(&m.response.raw)
            .map_err(|e| diverged(path, record, format!("{at}: {e}")))?;
        if parsed.decision != m.response.decision || parsed.reason != m.response.reason {
            return Err(diverged(
                path,
                record,
                format!("{at}: stored answer does not match the raw response"),
            ));
        }
    }
    match &record.debate {
        Some((stored, config)) => {
            let outcome = final_decision(&record.messages, config)
                .map_err(|e| diverged(path, record, e.to_string()))?;
            if outcome != *stored || outcome.decision != record.decision {
                return Err(diverged(
                    path,
                    record,
                    format!("stored outcome {stored:?} but messages give {outcome:?}"),
                ));
            }
        }
        None => {
            let [only] = record.messages.as_slice() else {
                return Err(diverged(
                    path,
                    record,
                    "single-agent transcript must hold one message".into(),
                ));
            };
            if only.response.decision != record.decision {
                return Err(diverged(
                    path,
                    record,
                    "stored decision does not match the answer".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Verifies a transcripts directory. With a config, also rebuilds the
/// report from the re-derived outcomes and compares it byte-for-byte with
/// the report stored next to the transcripts.
pub fn replay_check(
    dir: &Path,
    config: Option<&ExperimentConfig>,
) -> Result<ReplaySummary, HarnessError> {
    let (run_dir, transcripts_dir) = if dir.join(TRANSCRIPT_DIR).is_dir() {
        (dir.to_path_buf(), dir.join(TRANSCRIPT_DIR))
    } else {
        (dir.parent().unwrap_or(dir).to_path_buf(), dir.to_path_buf())
    };
    let records = read_transcripts(&transcripts_dir)?;
    if records.is_empty() {
        return Err(HarnessError::Transcript {
            path: transcripts_dir.display().to_string(),
            message: "no transcripts found".into(),
        });
    }
    let mut messages = 0;
    for (path, record) in &records {
        check_record(path, record)?;
        messages += record.messages.len();
    }

    let mut files_compared = Vec::new();
    if let Some(config) = config {
        let records: Vec<RunRecord> = records.iter().map(|(_, r)| r.clone()).collect();
        let split = prepare_data(config)?;
        let (single, mas) = evaluate_records(config, &split.eval, &records)?;
        let bundle = build_report(&single, &mas, &config.systems, config.run.histogram)?;
        let scratch = tempfile::tempdir().map_err(|e| HarnessError::Io {
            path: "temporary directory".into(),
            source: e,
        })?;
        for rebuilt in write_report(&bundle, scratch.path())? {
            let rel = rebuilt
                .strip_prefix(scratch.path())
                .expect("written under scratch");
            let stored = run_dir.join(rel);
            let same = std::fs::read(&stored).ok() == std::fs::read(&rebuilt).ok();
            if !same {
                return Err(HarnessError::ReportDivergence {
                    path: stored.display().to_string(),
                });
            }
            files_compared.push(stored);
        }
    }
    Ok(ReplaySummary {
        transcripts: records.len(),
        messages,
        files_compared,
    })
}
