use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{write_atomic, HarnessError};
use crate::agents::{record_transcript_entry, AgentResponse, TranscriptStore};
use crate::debate::{DebateConfig, DebateMessage, DecisionVia, Outcome, Paradigm, Transcript};

pub const TRANSCRIPT_DIR: &str = "transcripts";
const SINGLE_PARADIGM: &str = "single";

/// Which run a transcript belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Single { agent: String },
    System { name: String, paradigm: Paradigm },
}

impl Scope {
    /// Replay scope. The agent id is part of the replay key already, so all
    /// single-agent runs share one scope.
    pub fn replay_scope(&self) -> String {
        match self {
            Scope::Single { .. } => SINGLE_PARADIGM.to_string(),
            Scope::System { name, paradigm } => format!("{name}/{}", paradigm.slug()),
        }
    }

    /// File-name stem; injective because the two shapes use different
    /// prefixes and the paradigm is always the last component.
    pub fn slug(&self) -> String {
        match self {
            Scope::Single { agent } => format!("single.{agent}"),
            Scope::System { name, paradigm } => format!("sys.{name}.{}", paradigm.slug()),
        }
    }

    fn system(&self) -> Option<&str> {
        match self {
            Scope::Single { .. } => None,
            Scope::System { name, .. } => Some(name),
        }
    }

    fn paradigm_str(&self) -> &'static str {
        match self {
            Scope::Single { .. } => SINGLE_PARADIGM,
            Scope::System { paradigm, .. } => paradigm.slug(),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Single { agent } => write!(f, "single:{agent}"),
            Scope::System { name, paradigm } => write!(f, "{name}/{}", paradigm.slug()),
        }
    }
}

/// The persisted result of one task: a single-agent answer or a debate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scope: Scope,
    pub instance_id: u64,
    pub messages: Vec<DebateMessage>,
    pub decision: bool,
    /// Debate outcome and config; `None` for single-agent records.
    pub debate: Option<(Outcome, DebateConfig)>,
}

impl RunRecord {
    pub fn single(agent: &str, instance_id: u64, response: AgentResponse) -> Self {
        let decision = response.decision;
        Self {
            scope: Scope::Single {
                agent: agent.to_string(),
            },
            instance_id,
            messages: vec![DebateMessage {
                agent_id: agent.to_string(),
                display_index: 0,
                round: 0,
                response,
            }],
            decision,
            debate: None,
        }
    }

    pub fn from_transcript(system: &str, t: Transcript) -> Self {
        Self {
            scope: Scope::System {
                name: system.to_string(),
                paradigm: t.config.paradigm,
            },
            instance_id: t.instance_id,
            messages: t.messages,
            decision: t.outcome.decision,
            debate: Some((t.outcome, t.config)),
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}__{:06}.jsonl", self.scope.slug(), self.instance_id)
    }

    pub fn consensus(&self) -> Option<bool> {
        self.debate
            .as_ref()
            .map(|(o, _)| o.via == DecisionVia::Consensus)
    }
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptLine {
    Message {
        instance_id: u64,
        system: Option<String>,
        paradigm: String,
        round: u32,
        agent_id: String,
        display_index: usize,
        raw: String,
        decision: bool,
        reason: Option<String>,
        parse_retries: u32,
    },
    Outcome {
        instance_id: u64,
        system: Option<String>,
        paradigm: String,
        decision: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        via: Option<DecisionVia>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rounds_used: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<DebateConfig>,
    },
}

pub fn render_jsonl(record: &RunRecord) -> String {
    let system = record.scope.system().map(str::to_string);
    let paradigm = record.scope.paradigm_str().to_string();
    let mut out = String::new();
    for m in &record.messages {
        let line = TranscriptLine::Message {
            instance_id: record.instance_id,
            system: system.clone(),
            paradigm: paradigm.clone(),
            round: m.round,
            agent_id: m.agent_id.clone(),
            display_index: m.display_index,
            raw: m.response.raw.clone(),
            decision: m.response.decision,
            reason: m.response.reason.clone(),
            parse_retries: m.response.parse_retries,
        };
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    let outcome = TranscriptLine::Outcome {
        instance_id: record.instance_id,
        system,
        paradigm,
        decision: record.decision,
        via: record.debate.as_ref().map(|(o, _)| o.via),
        rounds_used: record.debate.as_ref().map(|(o, _)| o.rounds_used),
        config: record.debate.as_ref().map(|(_, c)| c.clone()),
    };
    out.push_str(&serde_json::to_string(&outcome).expect("line serializes"));
    out.push('\n');
    out
}

/// Writes `record` to `out_dir/transcripts/` atomically and returns the
/// file path.
pub fn persist_transcript(record: &RunRecord, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    let path = out_dir.join(TRANSCRIPT_DIR).join(record.file_name());
    write_atomic(&path, render_jsonl(record).as_bytes()).map_err(|source| {
        HarnessError::Persist {
            path: path.display().to_string(),
            source,
        }
    })?;
    Ok(path)
}

fn bad(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Transcript {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn parse_scope(
    path: &Path,
    system: Option<String>,
    paradigm: &str,
    agent: Option<&str>,
) -> Result<Scope, HarnessError> {
    match (system, paradigm) {
        (None, SINGLE_PARADIGM) => Ok(Scope::Single {
            agent: agent
                .ok_or_else(|| bad(path, "single-agent transcript without a message"))?
                .to_string(),
        }),
        (Some(name), "memory") => Ok(Scope::System {
            name,
            paradigm: Paradigm::Memory,
        }),
        (Some(name), "collref") => Ok(Scope::System {
            name,
            paradigm: Paradigm::CollRef,
        }),
        (s, p) => Err(bad(
            path,
            format!("unknown scope system={s:?} paradigm={p:?}"),
        )),
    }
}

/// Reads one transcript file. Stored `decision`/`reason` fields are taken
/// as written; use the replay check to compare them against `raw`.
pub fn read_transcript(path: &Path) -> Result<RunRecord, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(super::io_err(path))?;
    let mut messages = Vec::new();
    let mut outcome = None;
    let mut instance = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if outcome.is_some() {
            return Err(bad(
                path,
                format!("line {}: content after the outcome line", n + 1),
            ));
        }
        let parsed: TranscriptLine =
            serde_json::from_str(line).map_err(|e| bad(path, format!("line {}: {e}", n + 1)))?;
        let id = match &parsed {
            TranscriptLine::Message { instance_id, .. }
            | TranscriptLine::Outcome { instance_id, .. } => *instance_id,
        };
        if *instance.get_or_insert(id) != id {
            return Err(bad(path, format!("line {}: mixed instance ids", n + 1)));
        }
        match parsed {
            TranscriptLine::Message {
                round,
                agent_id,
                display_index,
                raw,
                decision,
                reason,
                parse_retries,
                ..
            } => messages.push(DebateMessage {
                agent_id,
                display_index,
                round,
                response: AgentResponse {
                    raw,
                    decision,
                    reason,
                    parse_retries,
                },
            }),
            other @ TranscriptLine::Outcome { .. } => outcome = Some(other),
        }
    }
    let Some(TranscriptLine::Outcome {
        instance_id,
        system,
        paradigm,
        decision,
        via,
        rounds_used,
        config,
    }) = outcome
    else {
        return Err(bad(path, "missing outcome line"));
    };
    let scope = parse_scope(
        path,
        system,
        &paradigm,
        messages.first().map(|m| m.agent_id.as_str()),
    )?;
    let debate = match (&scope, via, rounds_used, config) {
        (Scope::Single { .. }, None, None, None) => None,
        (Scope::System { paradigm, .. }, Some(via), Some(rounds_used), Some(config))
            if config.paradigm == *paradigm =>
        {
            Some((
                Outcome {
                    decision,
                    via,
                    rounds_used,
                },
                config,
            ))
        }
        _ => {
            return Err(bad(
                path,
                "outcome fields do not match the transcript scope",
            ))
        }
    };
    Ok(RunRecord {
        scope,
        instance_id,
        messages,
        decision,
        debate,
    })
}

/// All `*.jsonl` files in `dir`, sorted by file name.
pub fn transcript_files(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(super::io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_transcripts(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>, HarnessError> {
    transcript_files(dir)?
        .into_iter()
        .map(|p| read_transcript(&p).map(|r| (p, r)))
        .collect()
}

/// Loads every transcript under `dir` into a replay store. `dir` may be a
/// run's output directory or its `transcripts/` subdirectory.
pub fn load_replay_store(dir: &Path) -> Result<Arc<TranscriptStore>, HarnessError> {
    let nested = dir.join(TRANSCRIPT_DIR);
    let dir = if nested.is_dir() {
        nested.as_path()
    } else {
        dir
    };
    let store = TranscriptStore::new();
    for (path, record) in read_transcripts(dir)? {
        let scope = record.scope.replay_scope();
        for m in &record.messages {
            record_transcript_entry(
                &store,
                &scope,
                &m.agent_id,
                record.instance_id,
                m.round,
                &m.response,
            )
            .map_err(|e| bad(&path, e.to_string()))?;
        }
    }
    Ok(Arc::new(store))
}
