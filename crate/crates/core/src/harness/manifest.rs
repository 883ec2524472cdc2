use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{write_atomic, HarnessError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Done,
    Errored { error: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub pending: usize,
    pub done: usize,
    pub errored: usize,
}

/// Progress record of a run. Tasks are keyed `<scope>#<instance id>`, one
/// per single-agent answer or debate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub started: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<DateTime<Utc>>,
    pub counts: ManifestCounts,
    pub tasks: BTreeMap<String, TaskStatus>,
}

impl RunManifest {
    pub fn new(config_hash: String, task_keys: impl IntoIterator<Item = String>) -> Self {
        let mut m = Self {
            config_hash,
            started: Utc::now(),
            finished: None,
            counts: ManifestCounts::default(),
            tasks: task_keys
                .into_iter()
                .map(|k| (k, TaskStatus::Pending))
                .collect(),
        };
        m.recount();
        m
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => {
                serde_json::from_slice(&bytes)
                    .map(Some)
                    .map_err(|e| HarnessError::Transcript {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(super::io_err(&path)(e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        write_atomic(&path, &json).map_err(|source| HarnessError::Persist {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn set(&mut self, key: &str, status: TaskStatus) {
        self.tasks.insert(key.to_string(), status);
        self.recount();
    }

    pub fn status(&self, key: &str) -> Option<&TaskStatus> {
        self.tasks.get(key)
    }

    fn recount(&mut self) {
        let mut c = ManifestCounts::default();
        for s in self.tasks.values() {
            match s {
                TaskStatus::Pending => c.pending += 1,
                TaskStatus::Done => c.done += 1,
                TaskStatus::Errored { .. } => c.errored += 1,
            }
        }
        self.counts = c;
    }
}
