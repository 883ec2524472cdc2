use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::Utc;

use super::cache::{cached_invoke, CachedInvoker, ResponseCache};
use super::config::ExperimentConfig;
use super::manifest::{RunManifest, TaskStatus};
use super::transcripts::{
    load_replay_store, persist_transcript, read_transcript, RunRecord, Scope, TRANSCRIPT_DIR,
};
use super::HarnessError;
use crate::agents::{AgentSpec, Backend, Invoke, InvokeContext, Invoker};
use crate::analysis::{build_report, write_report, ReportBundle, SystemSpec};
use crate::debate::{run_debate, DebateConfig, DebateEnv, Paradigm, TemplatePromptBuilder};
use crate::fairness::{evaluate, Evaluation};
use crate::tabular::{
    build_task_prompt, load_dataset, split_dataset, DatasetSplit, PromptTemplate, TabularInstance,
};

/// Minimum spacing between intermediate manifest writes. The manifest is
/// always a prefix of completed work; throttling only means a crash may
/// redo a few already-persisted tasks.
const MANIFEST_FLUSH_INTERVAL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from an existing manifest in `out_dir`.
    pub resume: bool,
    /// Stop after starting this many pending tasks (used to simulate an
    /// interrupted run). The report is only written once nothing is pending.
    pub task_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub eval_instances: usize,
    pub tasks_total: usize,
    /// Tasks executed in this invocation.
    pub tasks_run: usize,
    pub done: usize,
    pub errored: usize,
    pub pending: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub debates: usize,
    pub consensus: usize,
    /// Eval instances excluded from metrics, summed over agents and systems.
    pub excluded: usize,
}

impl RunStats {
    pub fn complete(&self) -> bool {
        self.pending == 0
    }

    pub fn consensus_rate(&self) -> Option<f64> {
        (self.debates > 0).then(|| self.consensus as f64 / self.debates as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub single: BTreeMap<String, Evaluation>,
    pub mas: BTreeMap<(String, Paradigm), Evaluation>,
    pub records: Vec<RunRecord>,
    /// `None` when the run stopped with tasks still pending.
    pub report: Option<ReportBundle>,
    pub stats: RunStats,
}

enum TaskKind<'a> {
    Single(&'a AgentSpec),
    Debate {
        system: &'a SystemSpec,
        agents: Vec<AgentSpec>,
        config: DebateConfig,
    },
}

struct Task<'a> {
    scope: Scope,
    instance: &'a TabularInstance,
    kind: TaskKind<'a>,
}

impl Task<'_> {
    fn key(&self) -> String {
        format!("{}#{}", self.scope, self.instance.id)
    }
}

fn build_tasks<'a>(config: &'a ExperimentConfig, eval: &'a [TabularInstance]) -> Vec<Task<'a>> {
    let mut tasks = Vec::new();
    for agent in &config.agents {
        for instance in eval {
            tasks.push(Task {
                scope: Scope::Single {
                    agent: agent.id.clone(),
                },
                instance,
                kind: TaskKind::Single(agent),
            });
        }
    }
    for system in &config.systems {
        let agents: Vec<AgentSpec> = system
            .agents
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mut spec = config.agent(id).expect("validated").clone();
                spec.display_index = i;
                spec
            })
            .collect();
        for &paradigm in &system.paradigms {
            for instance in eval {
                tasks.push(Task {
                    scope: Scope::System {
                        name: system.name.clone(),
                        paradigm,
                    },
                    instance,
                    kind: TaskKind::Debate {
                        system,
                        agents: agents.clone(),
                        config: config.debate_config(system, paradigm),
                    },
                });
            }
        }
    }
    tasks
}

struct Executor<'a> {
    template: &'a PromptTemplate,
    split: &'a DatasetSplit,
    invoker: &'a Invoker,
    cache: Option<&'a ResponseCache>,
}

impl Executor<'_> {
    fn execute(&self, task: &Task<'_>) -> Result<RunRecord, String> {
        match &task.kind {
            TaskKind::Single(agent) => {
                let prompt = build_task_prompt(self.template, &self.split.few_shot, task.instance)
                    .map_err(|e| e.to_string())?;
                let scope = task.scope.replay_scope();
                let ctx = InvokeContext {
                    scope: &scope,
                    instance: task.instance,
                    round: 0,
                    visible: &[],
                };
                let response = cached_invoke(self.cache, self.invoker, agent, &prompt, &ctx)
                    .map_err(|e| format!("agent `{}`: {e}", agent.id))?;
                Ok(RunRecord::single(&agent.id, task.instance.id, response))
            }
            TaskKind::Debate {
                system,
                agents,
                config,
            } => {
                let scope = task.scope.replay_scope();
                let invoker = CachedInvoker {
                    inner: self.invoker,
                    cache: self.cache,
                };
                let prompts = TemplatePromptBuilder {
                    template: self.template,
                    few_shot: &self.split.few_shot,
                };
                let env = DebateEnv {
                    invoker: &invoker as &dyn Invoke,
                    prompts: &prompts,
                    scope: &scope,
                };
                let transcript =
                    run_debate(task.instance, agents, config, &env).map_err(|e| e.to_string())?;
                Ok(RunRecord::from_transcript(&system.name, transcript))
            }
        }
    }
}

fn build_invoker(config: &ExperimentConfig) -> Result<Invoker, HarnessError> {
    let mut invoker = Invoker::new();
    let mut replay_paths = BTreeSet::new();
    let mut needs_http = false;
    for agent in &config.agents {
        match &agent.backend {
            Backend::Replay { path } => {
                replay_paths.insert(path.clone());
            }
            Backend::Http(_) => needs_http = true,
            Backend::Mock { .. } => {}
        }
    }
    for path in replay_paths {
        let store = load_replay_store(&path)?;
        invoker = invoker.with_replay_store(path, store);
    }
    if needs_http && !config.run.offline {
        invoker = invoker
            .with_http()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    Ok(invoker)
}

/// Deletes transcripts left over from an earlier run in `out_dir`, so a
/// fresh run never mixes in stale files.
fn clear_transcripts(out_dir: &Path) -> Result<(), HarnessError> {
    let dir = out_dir.join(TRANSCRIPT_DIR);
    if !dir.is_dir() {
        return Ok(());
    }
    for path in super::transcripts::transcript_files(&dir)? {
        std::fs::remove_file(&path).map_err(super::io_err(&path))?;
    }
    Ok(())
}

/// Loads the dataset and draws the few-shot/eval split described by the
/// config.
pub(crate) fn prepare_data(config: &ExperimentConfig) -> Result<DatasetSplit, HarnessError> {
    let ds = &config.dataset;
    let instances = load_dataset(&ds.path, &ds.schema)?;
    Ok(split_dataset(
        &instances,
        ds.few_shot_k,
        ds.eval_count,
        ds.seed,
    )?)
}

pub(crate) type SingleEvals = BTreeMap<String, Evaluation>;
pub(crate) type MasEvals = BTreeMap<(String, Paradigm), Evaluation>;

/// Turns completed records into per-agent and per-system evaluations.
/// Instances without a record (errored tasks) are excluded.
pub(crate) fn evaluate_records(
    config: &ExperimentConfig,
    eval: &[TabularInstance],
    records: &[RunRecord],
) -> Result<(SingleEvals, MasEvals), HarnessError> {
    let mut predictions: BTreeMap<&Scope, BTreeMap<u64, bool>> = BTreeMap::new();
    for r in records {
        predictions
            .entry(&r.scope)
            .or_default()
            .insert(r.instance_id, r.decision);
    }
    let groups = &config.dataset.schema.group_values;
    let empty = BTreeMap::new();
    let mut single = BTreeMap::new();
    for agent in &config.agents {
        let scope = Scope::Single {
            agent: agent.id.clone(),
        };
        let preds = predictions.get(&scope).unwrap_or(&empty);
        single.insert(agent.id.clone(), evaluate(preds, eval, groups)?);
    }
    let mut mas = BTreeMap::new();
    for system in &config.systems {
        for &paradigm in &system.paradigms {
            let scope = Scope::System {
                name: system.name.clone(),
                paradigm,
            };
            let preds = predictions.get(&scope).unwrap_or(&empty);
            mas.insert(
                (system.name.clone(), paradigm),
                evaluate(preds, eval, groups)?,
            );
        }
    }
    Ok((single, mas))
}

/// Runs every single-agent task and every debate described by `config`,
/// persists transcripts and the manifest under `run.out_dir`, and writes
/// the report once all tasks have a final status.
pub fn run_experiment(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let template = config.dataset.load_template()?;
    let split = prepare_data(config)?;
    let out_dir = config.run.out_dir.as_path();
    std::fs::create_dir_all(out_dir).map_err(super::io_err(out_dir))?;

    let tasks = build_tasks(config, &split.eval);
    let hash = config.hash();
    let mut completed: BTreeMap<String, RunRecord> = BTreeMap::new();
    let manifest = match (options.resume, RunManifest::load(out_dir)?) {
        (true, Some(mut m)) => {
            if m.config_hash != hash {
                return Err(HarnessError::Config(
                    "cannot resume: the config changed since the run started".into(),
                ));
            }
            for task in &tasks {
                let key = task.key();
                if m.status(&key) != Some(&TaskStatus::Done) {
                    continue;
                }
                let path = out_dir.join(TRANSCRIPT_DIR).join(format!(
                    "{}__{:06}.jsonl",
                    task.scope.slug(),
                    task.instance.id
                ));
                match read_transcript(&path) {
                    Ok(r) if r.scope == task.scope && r.instance_id == task.instance.id => {
                        completed.insert(key, r);
                    }
                    _ => {
                        tracing::warn!(task = %key, "transcript missing or unreadable; re-running");
                        m.set(&key, TaskStatus::Pending);
                    }
                }
            }
            m
        }
        _ => {
            clear_transcripts(out_dir)?;
            RunManifest::new(hash, tasks.iter().map(Task::key))
        }
    };

    let pending: Vec<&Task<'_>> = tasks
        .iter()
        .filter(|t| !completed.contains_key(&t.key()))
        .collect();
    let invoker = build_invoker(config)?;
    let cache = config.run.cache_dir.as_ref().map(ResponseCache::new);
    let executor = Executor {
        template: &template,
        split: &split,
        invoker: &invoker,
        cache: cache.as_ref(),
    };

    let budget = options.task_limit.unwrap_or(usize::MAX).min(pending.len());
    let workers = config.run.max_concurrency.min(budget).max(1);
    let next = AtomicUsize::new(0);
    let state = Mutex::new((manifest, Instant::now(), Vec::<(String, RunRecord)>::new()));
    let first_error: Mutex<Option<HarnessError>> = Mutex::new(None);

    if budget > 0 {
        tracing::info!(tasks = budget, workers, "starting tasks");
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= budget || first_error.lock().expect("poisoned").is_some() {
                        break;
                    }
                    let task = pending[i];
                    let key = task.key();
                    let status = match executor.execute(task) {
                        Ok(record) => match persist_transcript(&record, out_dir) {
                            Ok(_) => {
                                state
                                    .lock()
                                    .expect("poisoned")
                                    .2
                                    .push((key.clone(), record));
                                TaskStatus::Done
                            }
                            Err(e) => {
                                first_error.lock().expect("poisoned").get_or_insert(e);
                                break;
                            }
                        },
                        Err(error) => {
                            tracing::warn!(task = %key, %error, "task errored");
                            TaskStatus::Errored { error }
                        }
                    };
                    let mut guard = state.lock().expect("poisoned");
                    let (manifest, last_flush, _) = &mut *guard;
                    manifest.set(&key, status);
                    if last_flush.elapsed() >= MANIFEST_FLUSH_INTERVAL {
                        if let Err(e) = manifest.save(out_dir) {
                            first_error.lock().expect("poisoned").get_or_insert(e);
                            break;
                        }
                        *last_flush = Instant::now();
                    }
                });
            }
        });
    }

    let (mut manifest, _, fresh) = state.into_inner().expect("poisoned");
    if let Some(e) = first_error.into_inner().expect("poisoned") {
        // Keep whatever finished before the failure resumable.
        manifest.save(out_dir)?;
        return Err(e);
    }
    let tasks_run = budget;
    completed.extend(fresh);
    if tasks_run > 0 || !options.resume {
        if manifest.counts.pending == 0 {
            manifest.finished = Some(Utc::now());
        }
        manifest.save(out_dir)?;
    }

    let records: Vec<RunRecord> = {
        let mut v: Vec<RunRecord> = completed.into_values().collect();
        v.sort_by(|a, b| (&a.scope, a.instance_id).cmp(&(&b.scope, b.instance_id)));
        v
    };
    let (single, mas) = evaluate_records(config, &split.eval, &records)?;
    let debates: Vec<&RunRecord> = records.iter().filter(|r| r.debate.is_some()).collect();
    let stats = RunStats {
        eval_instances: split.eval.len(),
        tasks_total: tasks.len(),
        tasks_run,
        done: manifest.counts.done,
        errored: manifest.counts.errored,
        pending: manifest.counts.pending,
        backend_calls: invoker.backend_calls(),
        cache_hits: cache.as_ref().map_or(0, ResponseCache::hits),
        debates: debates.len(),
        consensus: debates
            .iter()
            .filter(|r| r.consensus() == Some(true))
            .count(),
        excluded: single
            .values()
            .chain(mas.values())
            .map(Evaluation::excluded)
            .sum(),
    };

    let report = if stats.complete() {
        let bundle = build_report(&single, &mas, &config.systems, config.run.histogram)?;
        write_report(&bundle, out_dir)?;
        Some(bundle)
    } else {
        tracing::info!(
            pending = stats.pending,
            "run interrupted; report not written"
        );
        None
    };

    Ok(ExperimentOutput {
        single,
        mas,
        records,
        report,
        stats,
    })
}
