//! End-to-end runs on small planted-signal tasks.

mod common;

use std::fs;
use std::sync::Arc;

use amplify_core::corpus::Split;
use amplify_core::harness::{
    build_client, render_report, run_experiment, run_sweep, ExperimentConfig, LlmSpec,
    ReportFormat, Runner, SweepAxis,
};
use amplify_core::llmclient::{fixtures_from_cache, save_fixtures, ResponseCache};
use amplify_core::prompting::PromptMode;
use amplify_core::selection::SelectionStrategy;

use common::*;

#[test]
fn answer_only_with_echo_gold_is_perfect() {
    let f = synthetic(&small_spec(1));
    let cfg = ExperimentConfig {
        mode: PromptMode::AnswerOnly,
        llm: LlmSpec::EchoGold,
        ..gated_config(&f)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.report.accuracy, 100.0);
    assert_eq!(out.report.correct, out.report.total);
    assert_eq!(out.report.total, 40);
    assert_eq!(out.report.proxy_validation_accuracy, None);
}

#[test]
fn amplify_beats_answer_only_and_matches_gate_oracle() {
    let f = synthetic(&small_spec(2));
    let runner = Runner::for_config(&gated_config(&f)).unwrap();
    let ao = runner
        .run(&ExperimentConfig { mode: PromptMode::AnswerOnly, ..gated_config(&f) })
        .unwrap();
    let amp = runner.run(&gated_config(&f)).unwrap();
    for out in [&ao, &amp] {
        let oracle = simulated_accuracy(&f.task, &f.lexicon, &out.prompts);
        assert_eq!(out.report.accuracy, oracle, "{}", out.report.mode);
        let r = &out.report;
        assert_eq!(r.correct + r.incorrect + r.parse_failures, r.total);
    }
    assert!(
        amp.report.accuracy >= ao.report.accuracy + 10.0,
        "AO {} AMPLIFY {}",
        ao.report.accuracy,
        amp.report.accuracy
    );
    // every chosen shot was an answer-only miss
    let probe = amp.report.probe.as_ref().unwrap();
    assert!(probe.misclassified > 0);
    for id in &amp.report.selected_shot_ids {
        let rec = amp.probe_records.iter().find(|r| &r.example_id == id).unwrap();
        assert!(rec.llm_misclassified);
        assert!(rec.mcs.is_some());
    }
}

#[test]
fn shortfall_uses_every_candidate() {
    let f = synthetic(&small_spec(3));
    let cfg = ExperimentConfig { s: 500, ..gated_config(&f) };
    let out = run_experiment(&cfg).unwrap();
    let misclassified = out.report.probe.as_ref().unwrap().misclassified;
    assert_eq!(out.report.selected_shot_ids.len(), misclassified);
    assert_eq!(out.report.shortfall, 500 - misclassified);
}

#[test]
fn artifacts_are_complete_and_keywords_appear_in_prompts() {
    let f = synthetic(&small_spec(4));
    let out_dir = f.dir.path().join("runs");
    let cfg = ExperimentConfig { out_dir: Some(out_dir.clone()), ..gated_config(&f) };
    let out = run_experiment(&cfg).unwrap();
    let dir = out.run_dir.clone().unwrap();
    assert!(dir.starts_with(&out_dir));
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert!(name.ends_with(&cfg.digest()[..12]), "{name}");
    for file in ["config.txt", "proxy.ampx", "attributions.jsonl", "probe.jsonl", "predictions.jsonl", "selection.json", "report.json"] {
        assert!(dir.join(file).is_file(), "{file}");
    }
    assert!(!dir.join("FAILED").exists());

    let dumped: Vec<serde_json::Value> = fs::read_to_string(dir.join("attributions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let test_ids: Vec<&str> = f.task.split(Split::Test).map(|e| e.id.as_str()).collect();
    let prompt = fs::read_to_string(dir.join("prompts").join(format!("{}.txt", test_ids[0]))).unwrap();
    assert_eq!(out.report.selected_shot_ids.len(), dumped.len());
    for id in &out.report.selected_shot_ids {
        let entry = dumped.iter().find(|d| d["example_id"] == id.as_str()).expect("dump per shot");
        for kw in entry["keywords"].as_array().unwrap() {
            assert!(prompt.contains(kw["surface"].as_str().unwrap()));
        }
        assert!(prompt.contains(entry["rationale"].as_str().unwrap()));
    }
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk["accuracy"], out.report.accuracy);
}

#[test]
fn failures_leave_a_marker() {
    let f = synthetic(&small_spec(5));
    let cfg = ExperimentConfig {
        out_dir: Some(f.dir.path().join("runs")),
        llm: LlmSpec::Replay { fixtures: f.dir.path().join("missing.json") },
        ..gated_config(&f)
    };
    assert!(Runner::for_config(&cfg).is_err());
    // a replay without the needed fixture fails mid-run
    let empty = f.dir.path().join("empty.json");
    fs::write(&empty, "{}").unwrap();
    let cfg = ExperimentConfig { llm: LlmSpec::Replay { fixtures: empty }, ..cfg };
    assert!(run_experiment(&cfg).is_err());
    let runs: Vec<_> = fs::read_dir(f.dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let dir = runs.into_iter().next().unwrap().unwrap().path();
    assert!(fs::read_to_string(dir.join("FAILED")).unwrap().contains("mock has no response"));
}

#[test]
fn chain_of_thought_uses_human_rationales() {
    let f = synthetic(&small_spec(6));
    let cfg = ExperimentConfig { mode: PromptMode::ChainOfThought, ..gated_config(&f) };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.shots.len(), cfg.s);
    for id in &out.report.selected_shot_ids {
        let e = f.task.get(id).unwrap();
        assert!(out.prompts[0].1.contains(e.cot_rationale.as_deref().unwrap()));
    }
}

#[test]
fn replay_rerun_is_identical_and_offline() {
    let f = synthetic(&small_spec(7));
    let live_cache = f.dir.path().join("cache-live");
    let first = run_experiment(&ExperimentConfig {
        cache_dir: Some(live_cache.clone()),
        ..gated_config(&f)
    })
    .unwrap();
    let fixtures = fixtures_from_cache(&ResponseCache::new(&live_cache).unwrap()).unwrap();
    let path = f.dir.path().join("fixtures.json");
    save_fixtures(&path, &fixtures).unwrap();

    let replay = ExperimentConfig {
        llm: LlmSpec::Replay { fixtures: path },
        cache_dir: Some(f.dir.path().join("cache-replay")),
        ..gated_config(&f)
    };
    let second = run_experiment(&replay).unwrap();
    let third = run_experiment(&replay).unwrap();
    assert_eq!(third.report.run.endpoint_calls, 0);
    assert_eq!(second.report.content(), third.report.content());
    // the replayed predictions match the original run
    assert_eq!(second.predictions.iter().map(|p| &p.raw_text).collect::<Vec<_>>(),
               first.predictions.iter().map(|p| &p.raw_text).collect::<Vec<_>>());
    assert_eq!(first.report.accuracy, third.report.accuracy);
}

#[test]
fn sweeps_share_the_runner_and_isolate_failures() {
    let f = synthetic(&small_spec(8));
    let base = gated_config(&f);
    let runner = Runner::for_config(&base).unwrap();
    let table = run_sweep(&runner, &base, &SweepAxis::strategies(3)).unwrap();
    assert_eq!(table.cells.len(), 4);
    let labels: Vec<&str> = table.cells.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["Random", "L-MCS", "H-MCS", "F-Exp"]);
    assert!(table.failures().is_empty());
    let text = render_report(&table.reports().into_iter().cloned().collect::<Vec<_>>(), ReportFormat::Text).unwrap();
    assert_eq!(text.lines().count(), 6);

    // a broken template fails its cell only
    let bad = SweepAxis::KeywordsShots(vec![(0, 5), (2, 5)]);
    let table = run_sweep(&runner, &base, &bad).unwrap();
    assert_eq!(table.failures().len(), 1);
    assert_eq!(table.reports().len(), 1);
}

#[test]
fn shared_client_counts_cache_hits_across_runs() {
    let f = synthetic(&small_spec(9));
    let cfg = ExperimentConfig {
        mode: PromptMode::AnswerOnly,
        cache_dir: Some(f.dir.path().join("c")),
        ..gated_config(&f)
    };
    let client = Arc::new(build_client(&cfg, &f.task).unwrap());
    let runner = Runner::new(f.task.clone(), client);
    let a = runner.run(&cfg).unwrap();
    let b = runner.run(&cfg).unwrap();
    assert_eq!(a.report.run.endpoint_calls, 40);
    assert_eq!(b.report.run.endpoint_calls, 0);
    assert_eq!(b.report.run.cache_hits, 40);
    assert_eq!(a.report.content(), b.report.content());
}

#[test]
fn random_strategy_is_seeded() {
    let f = synthetic(&small_spec(10));
    let runner = Runner::for_config(&gated_config(&f)).unwrap();
    let pick = |seed| {
        runner
            .run(&ExperimentConfig { strategy: SelectionStrategy::Random { seed }, ..gated_config(&f) })
            .unwrap()
            .report
            .selected_shot_ids
    };
    assert_eq!(pick(1), pick(1));
    assert_ne!(pick(1), pick(2));
}
