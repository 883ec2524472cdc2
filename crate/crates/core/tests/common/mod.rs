//! Fixture builders shared by the integration test targets.
#![allow(dead_code)]

pub mod golden;

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

/// A minimal template over the synthetic `score`/`sex` columns.
pub const TEMPLATE: &str = r#"{
  "task_header": "Task: Decide whether the candidate's score is high.\n",
  "format_block": "Expected Format:\n```yaml\nclass: True/False\n```\n",
  "few_shot_item_template": "\nExample {index}:\n{Profile}\n\n{question}\nAnswer:\n{answer}\n",
  "profile_template": "The candidate is {sex} with score {score}.",
  "candidate_template": "\nCandidate Profile: {profile}\n\nQuestion: {question}\n\nAnswer:",
  "question": "Is the score high? True or false?",
  "debate": {
    "task_header": "Task:\n{preamble}\n\nDecide whether the candidate's score is high.\n",
    "format_block": "\nExpected Format:\n```yaml\nclass: True/False\nreason: \"...\"\n```\n",
    "candidate_template": "\nCandidate Profile: {profile}\n\nQuestion: {question}",
    "question": "Is the score high? True or false?"
  }
}"#;

pub fn schema(extra_numeric: &[&str]) -> Value {
    let mut columns = vec![json!({"name": "score", "kind": "numeric"})];
    columns.extend(
        extra_numeric
            .iter()
            .map(|c| json!({"name": c, "kind": "numeric"})),
    );
    json!({
        "columns": columns,
        "label_column": "label",
        "positive_label": "1",
        "negative_label": "0",
        "sensitive_column": "sex",
        "group_values": ["M", "F"]
    })
}

/// Deterministic pseudo-random score in 0..100 for row `id`.
pub fn score(id: u64) -> u64 {
    (id.wrapping_mul(2_654_435_761) >> 7) % 100
}

/// `n` rows alternating M/F with label `score >= 50`.
pub fn synthetic_rows(n: u64) -> Vec<Vec<String>> {
    (0..n)
        .map(|id| {
            let s = score(id);
            vec![
                if id % 2 == 0 { "M" } else { "F" }.to_string(),
                s.to_string(),
                u8::from(s >= 50).to_string(),
            ]
        })
        .collect()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

pub fn mock(id: &str, rule: Value) -> Value {
    json!({"id": id, "backend": {"kind": "mock", "rule": rule}})
}

pub fn constant(value: bool) -> Value {
    json!({"kind": "constant", "value": value})
}

pub fn threshold(column: &str, cutoff: f64) -> Value {
    json!({"kind": "threshold", "column": column, "cutoff": cutoff})
}

pub fn conformist(fallback: Value) -> Value {
    json!({"kind": "conformist", "fallback": fallback})
}

pub fn stochastic(base: Value, flip_prob: f64, seed: u64) -> Value {
    json!({"kind": "stochastic", "base": base, "flip_prob": flip_prob, "seed": seed})
}

/// A self-contained experiment directory: data, template and config.
pub struct Experiment {
    pub dir: tempfile::TempDir,
    pub config: Value,
}

impl Experiment {
    /// Synthetic `n`-row dataset, every row in the eval set, one system of
    /// the given agents running both paradigms.
    pub fn new(n: u64, agents: Vec<Value>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_csv(
            &dir.path().join("data.csv"),
            &["sex", "score", "label"],
            &synthetic_rows(n),
        );
        std::fs::write(dir.path().join("template.json"), TEMPLATE).unwrap();
        let ids: Vec<Value> = agents.iter().map(|a| a["id"].clone()).collect();
        let config = json!({
            "dataset": {
                "path": "data.csv",
                "schema": schema(&[]),
                "template": "template.json",
                "few_shot_k": 0,
                "eval_count": n,
                "seed": 11
            },
            "agents": agents,
            "systems": [{"name": "sys", "agents": ids, "paradigms": ["memory", "collref"]}],
            "debate": {"max_rounds": 5, "threshold": 1.0},
            "run": {"max_concurrency": 4, "out_dir": "out", "offline": true}
        });
        Self { dir, config }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.dir
            .path()
            .join(self.config["run"]["out_dir"].as_str().unwrap())
    }

    /// Writes the current config to `name` and returns its path.
    pub fn write_config(&self, name: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&self.config).unwrap()).unwrap();
        path
    }

    pub fn load(&self, name: &str) -> madfair::harness::ExperimentConfig {
        madfair::harness::ExperimentConfig::load(self.write_config(name)).unwrap()
    }
}

/// Every regular file under `dir`, relative path → bytes, in sorted order.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Report artefacts only (everything except the manifest).
pub fn report_snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut s = snapshot(dir);
    s.remove(Path::new("manifest.json"));
    s
}
