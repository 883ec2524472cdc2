use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::agents::{AgentSpec, Backend};
use crate::analysis::{HistogramConfig, SystemSpec};
use crate::debate::{DebateConfig, Paradigm};
use crate::tabular::{FeatureSchema, PromptTemplate};

const MIN_SYSTEM_AGENTS: usize = 3;
const MAX_SYSTEM_AGENTS: usize = 5;
const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub schema: FeatureSchema,
    /// Path to a template JSON file, or `builtin:adult` / `builtin:german`.
    pub template: String,
    pub few_shot_k: usize,
    pub eval_count: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn load_template(&self) -> Result<PromptTemplate, HarnessError> {
        match self.template.strip_prefix(BUILTIN_PREFIX) {
            Some("adult") => Ok(PromptTemplate::adult()),
            Some("german") => Ok(PromptTemplate::german()),
            Some(other) => Err(HarnessError::Config(format!(
                "unknown builtin template `{other}`"
            ))),
            None => Ok(PromptTemplate::load(&self.template)?),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateSettings {
    pub max_rounds: u32,
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub include_own_history: bool,
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// When set, HTTP backends are rejected at validation time.
    #[serde(default)]
    pub offline: bool,
    #[serde(default)]
    pub histogram: HistogramConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub agents: Vec<AgentSpec>,
    pub systems: Vec<SystemSpec>,
    pub debate: DebateSettings,
    pub run: RunSettings,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Names end up in file names, so keep them to a portable character set.
fn check_name(what: &str, name: &str) -> Result<(), HarnessError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "{what} `{name}` must be non-empty and use only ASCII letters, digits, `-`, `_` or `.`"
        )))
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(super::io_err(path))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.path);
        if !self.dataset.template.starts_with(BUILTIN_PREFIX) {
            let mut t = PathBuf::from(&self.dataset.template);
            resolve(base, &mut t);
            self.dataset.template = t.display().to_string();
        }
        resolve(base, &mut self.run.out_dir);
        if let Some(dir) = self.run.cache_dir.as_mut() {
            resolve(base, dir);
        }
        for agent in &mut self.agents {
            if let Backend::Replay { path } = &mut agent.backend {
                resolve(base, path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.dataset.schema.validate()?;
        if self.dataset.eval_count == 0 {
            return Err(HarnessError::Config("eval_count must be positive".into()));
        }
        if self.agents.is_empty() {
            return Err(HarnessError::Config("no agents declared".into()));
        }
        let mut ids = BTreeSet::new();
        for agent in &self.agents {
            check_name("agent id", &agent.id)?;
            if !ids.insert(agent.id.as_str()) {
                return Err(HarnessError::Config(format!(
                    "duplicate agent id `{}`",
                    agent.id
                )));
            }
            if self.run.offline && matches!(agent.backend, Backend::Http(_)) {
                return Err(HarnessError::Config(format!(
                    "agent `{}` uses an http backend but the run is offline",
                    agent.id
                )));
            }
            if !(agent.decoding.temperature >= 0.0 && agent.decoding.temperature.is_finite()) {
                return Err(HarnessError::Config(format!(
                    "agent `{}` has an invalid temperature",
                    agent.id
                )));
            }
        }
        if self.systems.is_empty() {
            return Err(HarnessError::Config("no systems declared".into()));
        }
        let mut names = BTreeSet::new();
        for system in &self.systems {
            check_name("system name", &system.name)?;
            if !names.insert(system.name.as_str()) {
                return Err(HarnessError::Config(format!(
                    "duplicate system name `{}`",
                    system.name
                )));
            }
            let n = system.agents.len();
            if !(MIN_SYSTEM_AGENTS..=MAX_SYSTEM_AGENTS).contains(&n) {
                return Err(HarnessError::Config(format!(
                    "system `{}` has {n} agents; expected {MIN_SYSTEM_AGENTS} to {MAX_SYSTEM_AGENTS}",
                    system.name
                )));
            }
            for id in &system.agents {
                if !ids.contains(id.as_str()) {
                    return Err(HarnessError::Config(format!(
                        "system `{}` references unknown agent `{id}`",
                        system.name
                    )));
                }
            }
            if system.paradigms.is_empty() {
                return Err(HarnessError::Config(format!(
                    "system `{}` lists no paradigms",
                    system.name
                )));
            }
            let distinct: BTreeSet<_> = system.paradigms.iter().collect();
            if distinct.len() != system.paradigms.len() {
                return Err(HarnessError::Config(format!(
                    "system `{}` lists a paradigm twice",
                    system.name
                )));
            }
            // Catches duplicate constituents, bad M and bad T in one place.
            self.debate_config(system, system.paradigms[0])
                .validate()
                .map_err(|e| HarnessError::Config(format!("system `{}`: {e}", system.name)))?;
        }
        if self.run.max_concurrency == 0 {
            return Err(HarnessError::Config(
                "max_concurrency must be at least 1".into(),
            ));
        }
        if let Some(name) = self.dataset.template.strip_prefix(BUILTIN_PREFIX) {
            if !matches!(name, "adult" | "german") {
                return Err(HarnessError::Config(format!(
                    "unknown builtin template `{name}`"
                )));
            }
        }
        Ok(())
    }

    pub fn debate_config(&self, system: &SystemSpec, paradigm: Paradigm) -> DebateConfig {
        DebateConfig {
            paradigm,
            max_rounds: self.debate.max_rounds,
            threshold: self.debate.threshold,
            agent_order: system.agents.clone(),
            include_own_history: self.debate.include_own_history,
        }
    }

    pub fn agent(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Hash of the settings that determine task outcomes. Execution-only
    /// knobs (concurrency, cache and output locations) are left out so a
    /// resumed run may change them.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.max_concurrency = 0;
        c.run.cache_dir = None;
        c.run.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
