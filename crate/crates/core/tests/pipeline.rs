//! End-to-end harness behaviour: structure, determinism, resume, caching,
//! error exclusion, persistence and replay.

mod common;

use std::path::Path;

use common::*;
use madfair::analysis::render_markdown;
use madfair::debate::Paradigm;
use madfair::fairness::MetricName;
use madfair::harness::{
    persist_transcript, read_transcript, replay_check, run_experiment, HarnessError, RunManifest,
    RunOptions, RunRecord, TaskStatus,
};
use serde_json::json;

fn three_mocks() -> Vec<serde_json::Value> {
    vec![
        mock("hi", threshold("score", 50.0)),
        mock("lo", threshold("score", 30.0)),
        mock("follower", conformist(threshold("score", 70.0))),
    ]
}

fn full() -> RunOptions {
    RunOptions::default()
}

#[test]
fn report_has_constituent_and_paradigm_rows() {
    let exp = Experiment::new(40, three_mocks());
    let config = exp.load("config.json");
    let out = run_experiment(&config, &full()).unwrap();
    let bundle = out.report.expect("complete run writes a report");
    assert_eq!(bundle.blocks.len(), 1);
    let rows: Vec<&str> = bundle.blocks[0]
        .rows
        .iter()
        .map(|r| r.row.as_str())
        .collect();
    assert_eq!(rows, ["Agent 1", "Agent 2", "Agent 3", "Memory", "CollRef"]);
    // 3 constituents x 2 paradigms x 7 metrics.
    assert_eq!(bundle.samples.len(), 42);

    let dir = exp.out_dir();
    for f in [
        "report.md",
        "summary.json",
        "manifest.json",
        "tables/systems.csv",
        "tables/samples.csv",
        "tables/quantiles.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let transcripts = std::fs::read_dir(dir.join("transcripts")).unwrap().count();
    assert_eq!(transcripts, 3 * 40 + 2 * 40);
    assert_eq!(out.stats.tasks_total, 200);
    assert_eq!(
        (out.stats.done, out.stats.errored, out.stats.pending),
        (200, 0, 0)
    );
    let report = std::fs::read_to_string(dir.join("report.md")).unwrap();
    assert_eq!(report, render_markdown(&bundle));

    let manifest = RunManifest::load(&dir).unwrap().unwrap();
    assert!(manifest.finished.is_some());
    assert!(manifest.tasks.values().all(|s| *s == TaskStatus::Done));
}

#[test]
fn identical_mocks_give_identical_deltas() {
    let rule = threshold("score", 40.0);
    let exp = Experiment::new(
        60,
        vec![
            mock("a", rule.clone()),
            mock("b", rule.clone()),
            mock("c", rule),
        ],
    );
    let out = run_experiment(&exp.load("config.json"), &full()).unwrap();
    let base = out.single["a"].deltas;
    for p in [Paradigm::Memory, Paradigm::CollRef] {
        assert_eq!(out.mas[&("sys".to_string(), p)].deltas, base);
    }
    for s in &out.report.unwrap().samples {
        assert!(matches!(s.change(), None | Some(0.0)), "{s:?}");
    }
}

#[test]
fn same_config_gives_byte_identical_outputs() {
    let exp = Experiment::new(30, three_mocks());
    run_experiment(&exp.load("config.json"), &full()).unwrap();
    let first = report_snapshot(&exp.out_dir());
    std::fs::remove_dir_all(exp.out_dir()).unwrap();
    run_experiment(&exp.load("config.json"), &full()).unwrap();
    assert_eq!(report_snapshot(&exp.out_dir()), first);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut exp = Experiment::new(40, three_mocks());
    exp.config["run"]["out_dir"] = json!("straight");
    run_experiment(&exp.load("straight.json"), &full()).unwrap();
    let straight = report_snapshot(&exp.out_dir());

    exp.config["run"]["out_dir"] = json!("interrupted");
    exp.config["run"]["max_concurrency"] = json!(3);
    let config = exp.load("interrupted.json");
    let partial = run_experiment(
        &config,
        &RunOptions {
            resume: false,
            task_limit: Some(100),
        },
    )
    .unwrap();
    assert!(partial.report.is_none());
    assert_eq!(partial.stats.pending, 100);
    let manifest = RunManifest::load(&exp.out_dir()).unwrap().unwrap();
    assert_eq!((manifest.counts.done, manifest.counts.pending), (100, 100));
    assert!(manifest.finished.is_none());
    assert!(!exp.out_dir().join("report.md").exists());

    let resumed = run_experiment(
        &config,
        &RunOptions {
            resume: true,
            task_limit: None,
        },
    )
    .unwrap();
    assert_eq!(
        resumed.stats.tasks_run, 100,
        "Done tasks must not be recomputed"
    );
    assert_eq!(report_snapshot(&exp.out_dir()), straight);
}

#[test]
fn resuming_a_finished_run_leaves_manifest_untouched() {
    let exp = Experiment::new(20, three_mocks());
    let config = exp.load("config.json");
    run_experiment(&config, &full()).unwrap();
    let manifest = std::fs::read(exp.out_dir().join("manifest.json")).unwrap();
    let out = run_experiment(
        &config,
        &RunOptions {
            resume: true,
            task_limit: None,
        },
    )
    .unwrap();
    assert_eq!(out.stats.tasks_run, 0);
    assert_eq!(out.stats.backend_calls, 0);
    assert_eq!(
        std::fs::read(exp.out_dir().join("manifest.json")).unwrap(),
        manifest
    );
}

#[test]
fn resume_refuses_a_changed_config() {
    let mut exp = Experiment::new(10, three_mocks());
    run_experiment(
        &exp.load("config.json"),
        &RunOptions {
            resume: false,
            task_limit: Some(5),
        },
    )
    .unwrap();
    exp.config["debate"]["max_rounds"] = json!(2);
    let err = run_experiment(
        &exp.load("config.json"),
        &RunOptions {
            resume: true,
            task_limit: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
}

#[test]
fn cache_serves_repeat_runs_without_changing_decisions() {
    let mut exp = Experiment::new(30, three_mocks());
    run_experiment(&exp.load("plain.json"), &full()).unwrap();
    let plain = report_snapshot(&exp.out_dir());

    exp.config["run"]["cache_dir"] = json!("cache");
    exp.config["run"]["out_dir"] = json!("cached1");
    let first = run_experiment(&exp.load("c1.json"), &full()).unwrap();
    assert!(first.stats.backend_calls > 0);
    assert_eq!(report_snapshot(&exp.out_dir()), plain);

    exp.config["run"]["out_dir"] = json!("cached2");
    let second = run_experiment(&exp.load("c2.json"), &full()).unwrap();
    assert_eq!(second.stats.backend_calls, 0);
    // Identical prompts recur across paradigms, so the first run already
    // hits; the second run is served entirely from the cache.
    assert_eq!(
        second.stats.cache_hits,
        first.stats.backend_calls + first.stats.cache_hits
    );
    assert_eq!(report_snapshot(&exp.out_dir()), plain);
}

#[test]
fn errored_instances_are_excluded_per_predictor() {
    // `flaky` only has a rule for group M, so it fails on every F row.
    let exp = Experiment::new(
        40,
        vec![
            mock("a", threshold("score", 50.0)),
            mock("b", threshold("score", 50.0)),
            mock(
                "flaky",
                json!({"kind": "group_biased", "rules": {"M": threshold("score", 50.0)}}),
            ),
        ],
    );
    let out = run_experiment(&exp.load("config.json"), &full()).unwrap();
    // Every F instance errors for `flaky` alone and for both debates.
    assert_eq!(out.single["a"].excluded(), 0);
    assert_eq!(out.single["flaky"].excluded(), 20);
    assert_eq!(out.single["flaky"].evaluated(), 20);
    assert_eq!(
        out.mas[&("sys".to_string(), Paradigm::Memory)].excluded(),
        20
    );
    assert_eq!(out.stats.errored, 20 * 3);
    // A group with no evaluated instances leaves its gaps Missing.
    assert_eq!(out.single["flaky"].deltas.get(MetricName::DAcc), None);
    let report = std::fs::read_to_string(exp.out_dir().join("report.md")).unwrap();
    assert!(report.contains("NA"));
    let manifest = RunManifest::load(&exp.out_dir()).unwrap().unwrap();
    assert_eq!(manifest.counts.errored, 60);
}

#[test]
fn concurrent_persistence_writes_well_formed_files() {
    let dir = tempfile::tempdir().unwrap();
    let response = madfair::agents::AgentResponse::from_raw(
        madfair::agents::render_answer(true, Some("r")),
        0,
    )
    .unwrap();
    std::thread::scope(|s| {
        for id in 0..50u64 {
            let response = response.clone();
            let dir = dir.path();
            s.spawn(move || {
                persist_transcript(&RunRecord::single("agent", id, response), dir).unwrap();
            });
        }
    });
    let files: Vec<_> = std::fs::read_dir(dir.path().join("transcripts"))
        .unwrap()
        .collect();
    assert_eq!(files.len(), 50);
    for f in files {
        let path = f.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
        read_transcript(&path).unwrap();
    }
}

fn stochastic_mocks() -> Vec<serde_json::Value> {
    vec![
        mock("s1", stochastic(threshold("score", 50.0), 0.2, 1)),
        mock("s2", stochastic(threshold("score", 40.0), 0.3, 2)),
        mock(
            "s3",
            conformist(stochastic(threshold("score", 60.0), 0.25, 3)),
        ),
    ]
}

fn replay_agents(ids: &[&str], transcripts: &Path) -> Vec<serde_json::Value> {
    ids.iter()
        .map(|id| json!({"id": id, "backend": {"kind": "replay", "path": transcripts}}))
        .collect()
}

#[test]
fn replay_backend_reproduces_a_recorded_run() {
    let mut exp = Experiment::new(40, stochastic_mocks());
    exp.config["run"]["out_dir"] = json!("recorded");
    let recorded = run_experiment(&exp.load("recorded.json"), &full()).unwrap();
    let recorded_dir = exp.out_dir();

    exp.config["agents"] = json!(replay_agents(
        &["s1", "s2", "s3"],
        &recorded_dir.join("transcripts")
    ));
    exp.config["run"]["out_dir"] = json!("replayed");
    let replayed = run_experiment(&exp.load("replayed.json"), &full()).unwrap();
    assert_eq!(replayed.records, recorded.records);
    assert_eq!(
        report_snapshot(&exp.out_dir()),
        report_snapshot(&recorded_dir)
    );
}

#[test]
fn replay_check_detects_tampering() {
    let exp = Experiment::new(20, stochastic_mocks());
    let config = exp.load("config.json");
    run_experiment(&config, &full()).unwrap();
    let summary = replay_check(&exp.out_dir(), Some(&config)).unwrap();
    assert_eq!(summary.transcripts, 3 * 20 + 2 * 20);
    assert!(!summary.files_compared.is_empty());

    // Flip the stored decision of one debate message.
    let target = exp
        .out_dir()
        .join("transcripts/sys.sys.collref__000007.jsonl");
    let text = std::fs::read_to_string(&target).unwrap();
    let tampered = if text.contains("\"decision\":true") {
        text.replacen("\"decision\":true", "\"decision\":false", 1)
    } else {
        text.replacen("\"decision\":false", "\"decision\":true", 1)
    };
    std::fs::write(&target, tampered).unwrap();
    match replay_check(&exp.out_dir(), Some(&config)) {
        Err(HarnessError::Divergence { instance_id, .. }) => assert_eq!(instance_id, 7),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn replay_check_rejects_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(replay_check(dir.path(), None).is_err());
}
