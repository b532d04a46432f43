//! Whole-run behavior on the tiny fixture: resuming, stale and torn judgment
//! files, per-document failures and the shape of emitted run files.

mod common;

use std::path::Path;
use std::sync::Arc;

use judgerank::backend::ScriptedBackend;
use judgerank::config::RunConfig;
use judgerank::exec::Execution;
use judgerank::ingest::{read_run, RunStrictness};
use judgerank::pipeline::StepBackends;
use judgerank::workflow::{
    cmd_rerank, ensemble_runs, read_judgments, ResolvedBackends, ResolvedJudge, RerankSummary, WorkflowError,
};
use serde_json::Value;

const JUDGMENTS: &str = "tiny.judgments.scripted.jsonl";

struct Counted {
    qa: Arc<ScriptedBackend>,
    judge: Arc<ScriptedBackend>,
    backends: ResolvedBackends,
}

fn counted(script: &str) -> Counted {
    let qa = Arc::new(ScriptedBackend::from_json(script).unwrap());
    let judge = Arc::new(ScriptedBackend::from_json(script).unwrap());
    let backends = ResolvedBackends {
        query_analysis: qa.clone(),
        judges: vec![ResolvedJudge {
            name: "scripted".into(),
            backends: StepBackends {
                query_analysis: qa.clone(),
                doc_analysis: judge.clone(),
                judgment: judge.clone(),
            },
        }],
    };
    Counted { qa, judge, backends }
}

fn fixture_script() -> String {
    std::fs::read_to_string(common::fixture("script.json")).unwrap()
}

async fn rerank(config: &RunConfig, c: &Counted) -> Result<RerankSummary, WorkflowError> {
    cmd_rerank(config, &c.backends, Execution::default()).await
}

fn setup() -> (tempfile::TempDir, RunConfig) {
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
    let dir = tempfile::tempdir().unwrap();
    let config = common::fixture_config(dir.path(), "");
    (dir, config)
}

fn assert_same_files(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) {
    let names = |s: &[(String, Vec<u8>)]| s.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(a), names(b));
    for ((name, x), (_, y)) in a.iter().zip(b) {
        let (x, y) = (String::from_utf8_lossy(x), String::from_utf8_lossy(y));
        if let Some((l, r)) = x.lines().zip(y.lines()).find(|(l, r)| l != r) {
            panic!("{name} differs:\n  {l}\n  {r}");
        }
        assert_eq!(x, y, "{name} differs in length");
    }
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[tokio::test]
async fn second_run_reuses_everything() {
    let (dir, config) = setup();
    let first = counted(&fixture_script());
    let s1 = rerank(&config, &first).await.unwrap();
    assert_eq!(first.qa.call_count(), 3);
    let judged = s1.members[0].generated;
    assert!(judged > 0);
    // One document-analysis call and one judgment call per candidate.
    assert_eq!(first.judge.call_count(), 2 * judged);
    let before = common::snapshot(dir.path());

    let second = counted(&fixture_script());
    let s2 = rerank(&config, &second).await.unwrap();
    assert_eq!(second.qa.call_count(), 0);
    assert_eq!(second.judge.call_count(), 0);
    assert_eq!((s2.members[0].reused, s2.members[0].generated), (judged, 0));
    assert_same_files(&common::snapshot(dir.path()), &before);
}

#[tokio::test]
async fn torn_last_line_is_regenerated() {
    let (dir, config) = setup();
    rerank(&config, &counted(&fixture_script())).await.unwrap();
    let before = common::snapshot(dir.path());
    let path = dir.path().join(JUDGMENTS);
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = text.trim_end().rfind('\n').unwrap() + 20;
    std::fs::write(&path, &text[..cut]).unwrap();

    let again = counted(&fixture_script());
    let s = rerank(&config, &again).await.unwrap();
    assert_eq!(s.members[0].generated, 1);
    assert_eq!(again.judge.call_count(), 2);
    assert_same_files(&common::snapshot(dir.path()), &before);
}

#[tokio::test]
async fn records_from_another_model_are_dropped() {
    let (dir, config) = setup();
    rerank(&config, &counted(&fixture_script())).await.unwrap();
    let path = dir.path().join(JUDGMENTS);
    let text = std::fs::read_to_string(&path).unwrap();
    let edited: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i % 4 == 0 {
                l.replace("\"scripted-judge\"", "\"older-model\"")
            } else {
                l.to_string()
            }
        })
        .map(|l| l + "\n")
        .collect();
    std::fs::write(&path, edited).unwrap();
    let stale = text.lines().count().div_ceil(4);

    let s = rerank(&config, &counted(&fixture_script())).await.unwrap();
    assert_eq!(s.members[0].dropped_stale, stale);
    assert_eq!(s.members[0].generated, stale);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
}

#[tokio::test]
async fn failed_documents_are_reported_then_resumed() {
    let (dir, config) = setup();
    let mut script: Value = serde_json::from_str(&fixture_script()).unwrap();
    let failing = serde_json::json!({"pattern": "Proofing temperature", "error": "transport"});
    script["rules"].as_array_mut().unwrap().insert(0, failing);
    let err = rerank(&config, &counted(&script.to_string())).await.unwrap_err();
    match err {
        WorkflowError::DocFailures(f) => {
            assert_eq!(f.len(), 1);
            assert_eq!((f[0].query_id.as_str(), f[0].doc_id.as_str()), ("q1", "d03"));
        }
        other => panic!("unexpected error {other}"),
    }
    let path = dir.path().join(JUDGMENTS);
    let saved = read_judgments(&path).unwrap();
    assert!(!saved.iter().any(|r| r.doc_id == "d03" && r.query_id == "q1"));
    assert!(!dir.path().join("tiny.rerank.judgerank-scripted-discrete.run").exists());

    let fixed = counted(&fixture_script());
    let s = rerank(&config, &fixed).await.unwrap();
    assert_eq!(s.members[0].generated, 1);
    assert_eq!(s.members[0].reused, saved.len());
    assert_eq!(fixed.qa.call_count(), 0);
}

#[tokio::test]
async fn emitted_runs_parse_strictly() {
    let (_dir, config) = setup();
    let s = rerank(&config, &counted(&fixture_script())).await.unwrap();
    let mut files = vec![s.first_stage.clone()];
    files.extend(s.members[0].run_files.iter().cloned());
    assert_eq!(files.len(), 4);
    for f in &files {
        let (rows, warnings) = read_run(f, RunStrictness::Strict).unwrap();
        assert!(warnings.is_empty(), "{}: {warnings:?}", f.display());
        assert_eq!(rows.len(), line_count(f));
        let tag = &rows[0].tag;
        for w in rows.windows(2) {
            assert_eq!(&w[1].tag, tag);
            if w[0].query_id == w[1].query_id {
                assert_eq!(w[1].rank, w[0].rank + 1);
                // Equal judge scores tie in continuous mode; rank carries the tie-break.
                assert!(w[1].score <= w[0].score, "{}: scores increase", f.display());
            } else {
                assert_eq!(w[1].rank, 1);
            }
        }
    }
}

#[tokio::test]
async fn ensemble_of_one_judge_matches_its_hybrid_run() {
    let (dir, config) = setup();
    let s = rerank(&config, &counted(&fixture_script())).await.unwrap();
    let (first_stage, _) = read_run(&s.first_stage, RunStrictness::Strict).unwrap();
    let records = read_judgments(&dir.path().join(JUDGMENTS)).unwrap();
    let runs = ensemble_runs(&first_stage, &[("a".into(), records.clone()), ("b".into(), records)], 100.0).unwrap();
    let hybrid = dir.path().join("tiny.rerank.judgerank-scripted-hybrid-a100.run");
    let (rows, _) = read_run(&hybrid, RunStrictness::Strict).unwrap();
    let ens: Vec<(String, String)> = runs
        .iter()
        .flat_map(|r| r.candidates.iter().map(move |c| (r.query_id.clone(), c.doc_id.clone())))
        .collect();
    let hyb: Vec<(String, String)> = rows.into_iter().map(|r| (r.query_id, r.doc_id)).collect();
    assert_eq!(ens, hyb);
}

#[tokio::test]
async fn direct_variant_skips_analyses() {
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
    let dir = tempfile::tempdir().unwrap();
    let config = common::fixture_config(dir.path(), "[pipeline]\nvariant = \"direct\"\n");
    let c = counted(&fixture_script());
    let s = rerank(&config, &c).await.unwrap();
    assert_eq!(c.qa.call_count(), 0);
    assert_eq!(c.judge.call_count(), s.members[0].generated);
    assert_eq!(s.members[0].label, "scripted-direct");
    let records = read_judgments(&s.members[0].judgments_path).unwrap();
    assert!(records.iter().all(|r| r.query_analysis.is_none() && r.doc_summary.is_none()));
}
