//! Acceptance suite. Prints one line per criterion:
//!
//! `criterion N: PASS|FAIL|SKIP (<elapsed> / limit <limit>) <detail>`
//!
//! Criteria run one after another inside a single test so the timings are not
//! distorted by other tests sharing the machine. Criterion 9 talks to a real
//! model server and only runs when `JUDGERANK_LIVE_ENDPOINT` and
//! `JUDGERANK_LIVE_MODEL` are set (`JUDGERANK_LIVE_API_KEY_ENV` optionally
//! names the variable holding the key).

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use judgerank::backend::ScriptedBackend;
use judgerank::bm25::{tokenize, Bm25Index, Bm25Params, Candidate, CandidateList};
use judgerank::eval::{agreement, ndcg_at_k, EvalOptions};
use judgerank::exec::Execution;
use judgerank::ingest::{read_corpus, read_queries, Corpus, Document};
use judgerank::pipeline::{
    run_pipeline, JudgmentRecord, PipelineSettings, PromptTemplate, QueryAnalysisCache, StepBackends,
};
use judgerank::scoring::{
    ensemble_score, hybrid_score, normalize_prob, rank_continuous, rank_discrete, rank_ensemble, rank_hybrid,
    Verdict,
};
use judgerank::workflow::{cmd_eval, cmd_rerank, EvalInput, ResolvedBackends};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_list(r: &mut ChaCha8Rng, n: usize) -> CandidateList {
    let mut scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..3000) as f64) / 100.0).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let mut ids: Vec<usize> = (0..n * 3).collect();
    ids.shuffle(r);
    CandidateList {
        query_id: "q".into(),
        k: n,
        entries: scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| Candidate {
                doc_id: format!("doc{}", ids[i]),
                first_stage_rank: i as u32 + 1,
                bm25_score: s,
            })
            .collect(),
    }
}

fn ids(run: &judgerank::scoring::RankedRun) -> Vec<String> {
    run.candidates.iter().map(|c| c.doc_id.clone()).collect()
}

fn criterion_1() -> Outcome {
    ensure!(normalize_prob(0.6, 0.2) == 0.75, "normalize_prob(0.6, 0.2) = {}", normalize_prob(0.6, 0.2));
    let mut r = rng(1);
    for _ in 0..100_000 {
        let a = r.random_range(1e-6..=1.0);
        let b = r.random_range(1e-6..=1.0);
        let s = normalize_prob(a, b);
        ensure!(s > 0.0 && s < 1.0, "S({a}, {b}) = {s} outside (0, 1)");
        ensure!(normalize_prob(a, a) == 0.5, "S({a}, {a}) = {}", normalize_prob(a, a));
    }
    Ok("exact 0.75, symmetry and open range over 1e5 random pairs".into())
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    for inst in 0..1000 {
        let n = r.random_range(1..=200);
        let list = random_list(&mut r, n);
        let verdicts: Vec<Verdict> = (0..n)
            .map(|_| if r.random_bool(0.4) { Verdict::Yes } else { Verdict::No })
            .collect();
        let run = rank_discrete(&list, &verdicts, "t").map_err(|e| e.to_string())?;
        let mut expected: Vec<String> = Vec::new();
        for want in [Verdict::Yes, Verdict::No] {
            for (c, v) in list.entries.iter().zip(&verdicts) {
                if *v == want {
                    expected.push(c.doc_id.clone());
                }
            }
        }
        ensure!(ids(&run) == expected, "instance {inst}: differs from brute-force partition");
        let verdict_of: HashMap<&str, Verdict> =
            list.entries.iter().zip(&verdicts).map(|(c, v)| (c.doc_id.as_str(), *v)).collect();
        let last_yes = run.candidates.iter().rposition(|c| verdict_of[c.doc_id.as_str()] == Verdict::Yes);
        let first_no = run.candidates.iter().position(|c| verdict_of[c.doc_id.as_str()] == Verdict::No);
        if let (Some(y), Some(n)) = (last_yes, first_no) {
            ensure!(y < n, "instance {inst}: a rejected document precedes an accepted one");
        }
        for w in run.candidates.windows(2) {
            if verdict_of[w[0].doc_id.as_str()] == verdict_of[w[1].doc_id.as_str()] {
                ensure!(
                    w[0].first_stage_rank < w[1].first_stage_rank,
                    "instance {inst}: partition not in first-stage order"
                );
            }
        }
    }
    Ok("1000 instances match the brute-force partitioner".into())
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    for inst in 0..1000 {
        let n = r.random_range(1..=200);
        let list = random_list(&mut r, n);
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0..=20) as f64 / 20.0).collect();

        let cont = rank_continuous(&list, &probs, "t").map_err(|e| e.to_string())?;
        let mut oracle: Vec<(f64, u32, String)> = list
            .entries
            .iter()
            .zip(&probs)
            .map(|(c, p)| (*p, c.first_stage_rank, c.doc_id.clone()))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let oracle_ids: Vec<String> = oracle.into_iter().map(|t| t.2).collect();
        ensure!(ids(&cont) == oracle_ids, "instance {inst}: continuous differs from sort oracle");

        let zero = rank_hybrid(&list, &probs, 0.0, "t").map_err(|e| e.to_string())?;
        let first: Vec<String> = list.entries.iter().map(|c| c.doc_id.clone()).collect();
        ensure!(ids(&zero) == first, "instance {inst}: alpha=0 is not first-stage order");

        let mut distinct: Vec<f64> = probs.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let min_gap = distinct.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let spread = list.entries.first().unwrap().bm25_score - list.entries.last().unwrap().bm25_score;
        let alpha = if min_gap.is_finite() { 2.0 * spread / min_gap + 1.0 } else { 1.0 };
        let dominant = rank_hybrid(&list, &probs, alpha, "t").map_err(|e| e.to_string())?;
        ensure!(ids(&dominant) == ids(&cont), "instance {inst}: dominating alpha {alpha} differs from continuous");

        let copies = r.random_range(1..=5);
        let per_model = vec![probs.clone(); copies];
        let ens = rank_ensemble(&list, &per_model, 100.0, "t").map_err(|e| e.to_string())?;
        let hyb = rank_hybrid(&list, &probs, 100.0, "t").map_err(|e| e.to_string())?;
        ensure!(ids(&ens) == ids(&hyb), "instance {inst}: ensemble of {copies} copies reorders hybrid");
        for (a, b) in ens.candidates.iter().zip(&hyb.candidates) {
            ensure!((a.final_score - b.final_score).abs() <= 1e-12, "instance {inst}: ensemble score drift");
        }
        for (c, p) in list.entries.iter().zip(&probs) {
            let e = ensemble_score(&vec![*p; copies], c.bm25_score, 100.0).map_err(|e| e.to_string())?;
            ensure!((e - hybrid_score(*p, c.bm25_score, 100.0)).abs() <= 1e-12, "instance {inst}: ensemble_score drift");
        }
    }
    Ok("continuous = sort oracle, alpha=0 = first stage, dominating alpha = continuous, ensemble = hybrid (1e-12) on 1000 instances".into())
}

/// Okapi BM25 computed from scratch for every document.
fn exhaustive_bm25(docs: &[Document], query: &str, params: Bm25Params) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| tokenize(&d.full_text())).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
    let q = tokenize(query);
    let mut out = Vec::new();
    for (d, t) in docs.iter().zip(&toks) {
        let mut s = 0.0;
        for term in &q {
            let tf = t.iter().filter(|w| *w == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = toks.iter().filter(|x| x.contains(term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            s += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * t.len() as f64 / avgdl));
        }
        if s > 0.0 {
            out.push((d.doc_id.clone(), s));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn criterion_4() -> Outcome {
    let doc = |id: &str, text: &str| Document {
        doc_id: id.into(),
        title: String::new(),
        text: text.into(),
    };
    let hand = Bm25Index::build(&[doc("d1", "cat cat dog"), doc("d2", "dog")], Bm25Params::default())
        .map_err(|e| e.to_string())?
        .score(&tokenize("cat"), "d1")
        .map_err(|e| e.to_string())?;
    ensure!((hand - 0.8355).abs() <= 1e-4, "hand-derived score {hand} is not 0.8355 +- 1e-4");

    let vocab: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    let mut r = rng(4);
    for inst in 0..200 {
        let n = r.random_range(1..=1000);
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let len = r.random_range(0..25);
                let words: Vec<&str> = (0..len)
                    .map(|_| {
                        // Skewed draw so some terms are common and others rare.
                        let j = (r.random_range(0.0f64..1.0).powi(2) * vocab.len() as f64) as usize;
                        vocab[j].as_str()
                    })
                    .collect();
                doc(&format!("d{i}"), &words.join(" "))
            })
            .collect();
        let params = Bm25Params::new(r.random_range(0.5..2.0), r.random_range(0.0..=1.0)).map_err(|e| e.to_string())?;
        let index = Bm25Index::build(&docs, params).map_err(|e| e.to_string())?;
        let qlen = r.random_range(1..=4);
        let query: Vec<&str> = (0..qlen).map(|_| vocab[r.random_range(0..vocab.len())].as_str()).collect();
        let query = query.join(" ");
        let k = r.random_range(1..=50);
        let got = index.retrieve_topk("q", &query, k).map_err(|e| e.to_string())?;
        let mut want = exhaustive_bm25(&docs, &query, params);
        want.truncate(k);
        ensure!(got.entries.len() == want.len(), "corpus {inst}: {} results, oracle {}", got.entries.len(), want.len());
        for (i, (c, (id, s))) in got.entries.iter().zip(&want).enumerate() {
            ensure!(&c.doc_id == id, "corpus {inst} rank {}: {} vs oracle {id}", i + 1, c.doc_id);
            ensure!((c.bm25_score - s).abs() <= 1e-9, "corpus {inst}: score {} vs oracle {s}", c.bm25_score);
            ensure!(c.first_stage_rank == i as u32 + 1, "corpus {inst}: rank numbering");
        }
    }
    Ok(format!("hand value {hand:.6}; top-k equals exhaustive scoring on 200 corpora"))
}

fn brute_ndcg(ranked: &[String], grades: &BTreeMap<String, u32>, k: usize) -> f64 {
    let g = |d: &String| *grades.get(d).unwrap_or(&0) as f64;
    let dcg: f64 = ranked.iter().take(k).enumerate().map(|(i, d)| (2f64.powf(g(d)) - 1.0) / ((i + 2) as f64).log2()).sum();
    let mut all: Vec<f64> = grades.values().map(|v| *v as f64).collect();
    all.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = all.iter().take(k).enumerate().map(|(i, v)| (2f64.powf(*v) - 1.0) / ((i + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn criterion_5() -> Outcome {
    let one: BTreeMap<String, u32> = [("a".to_string(), 1)].into();
    let v = ndcg_at_k(&["b", "a"], Some(&one), 10);
    ensure!((v - 1.0 / 3f64.log2()).abs() <= 1e-6, "rank-2 case gave {v}");
    let mut r = rng(5);
    for inst in 0..1000 {
        let n = r.random_range(1..=50);
        let grades: BTreeMap<String, u32> = (0..n).map(|i| (format!("d{i}"), r.random_range(0..=2))).collect();
        let mut ranked: Vec<String> = (0..n + 10).map(|i| format!("d{i}")).collect();
        ranked.shuffle(&mut r);
        ranked.truncate(r.random_range(0..=n + 10));
        let k = r.random_range(1..=20);
        let got = ndcg_at_k(&ranked, Some(&grades), k);
        let want = brute_ndcg(&ranked, &grades, k);
        ensure!((got - want).abs() <= 1e-9, "instance {inst}: {got} vs oracle {want}");
    }
    Ok(format!("rank-2 case {v:.6}; 1000 random graded qrels match the oracle"))
}

fn expected() -> Value {
    serde_json::from_str(&std::fs::read_to_string(common::fixture("expected.json")).unwrap()).unwrap()
}

async fn criterion_6() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut means = BTreeMap::new();
    for dir in [a.path(), b.path()] {
        let config = common::fixture_config(dir, "");
        let backends = ResolvedBackends::from_config(&config).map_err(|e| e.to_string())?;
        let summary = cmd_rerank(&config, &backends, Execution::default()).await.map_err(|e| e.to_string())?;
        let mut inputs = vec![EvalInput {
            dataset: "tiny".into(),
            run: summary.first_stage.clone(),
            qrels: common::fixture("qrels.tsv"),
        }];
        for f in &summary.members[0].run_files {
            inputs.push(EvalInput {
                dataset: "tiny".into(),
                run: f.clone(),
                qrels: common::fixture("qrels.tsv"),
            });
        }
        let reports = cmd_eval(&inputs, EvalOptions::default(), Execution::default()).map_err(|e| e.to_string())?;
        for rep in reports {
            means.insert(rep.tag.clone(), rep.datasets[0].clone());
        }
    }
    ensure!(common::snapshot(a.path()) == common::snapshot(b.path()), "two runs produced different bytes");
    let exp = expected();
    let tag_of = |mode: &str| match mode {
        "first-stage" => "bm25".to_string(),
        "hybrid" => "judgerank-scripted-hybrid-a100".to_string(),
        m => format!("judgerank-scripted-{m}"),
    };
    let mut detail = Vec::new();
    for mode in ["first-stage", "discrete", "continuous", "hybrid"] {
        let report = means.get(&tag_of(mode)).ok_or(format!("no report for {mode}"))?;
        let want_mean = exp[mode]["mean"].as_f64().unwrap();
        ensure!((report.mean - want_mean).abs() <= 1e-9, "{mode}: nDCG@10 {} vs expected {want_mean}", report.mean);
        for (q, v) in &report.per_query {
            let w = exp[mode]["ndcg"][q].as_f64().unwrap();
            ensure!((v - w).abs() <= 1e-9, "{mode} {q}: {v} vs expected {w}");
        }
        let file = if mode == "first-stage" {
            a.path().join("tiny.first-stage.bm25.run")
        } else {
            a.path().join(format!("tiny.rerank.{}.run", tag_of(mode)))
        };
        let (rows, _) = judgerank::ingest::read_run(&file, judgerank::ingest::RunStrictness::Strict).map_err(|e| e.to_string())?;
        let mut by_q: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for row in rows {
            by_q.entry(row.query_id).or_default().push(row.doc_id);
        }
        for (q, docs) in &by_q {
            let want: Vec<String> = serde_json::from_value(exp[mode]["rankings"][q].clone()).unwrap();
            ensure!(docs == &want, "{mode} {q}: ranking {docs:?} vs expected {want:?}");
        }
        detail.push(format!("{mode}={:.4}", report.mean));
    }
    let d = means[&tag_of("discrete")].mean;
    let h = means[&tag_of("hybrid")].mean;
    ensure!(d <= h, "discrete {d} > hybrid {h}");
    Ok(format!("byte-identical reruns; nDCG@10 {}", detail.join(" ")))
}

async fn criterion_7() -> Outcome {
    let docs = read_corpus(&common::fixture("corpus.jsonl")).map_err(|e| e.to_string())?;
    let queries = read_queries(&common::fixture("queries.jsonl")).map_err(|e| e.to_string())?;
    let index = Bm25Index::build(&docs, Bm25Params::default()).map_err(|e| e.to_string())?;
    let corpus = Corpus::new(docs).map_err(|e| e.to_string())?;
    let mut script: Value = serde_json::from_str(&std::fs::read_to_string(common::fixture("script.json")).unwrap()).unwrap();
    // Uneven reply latencies so completion order differs from submission order.
    for (i, rule) in script["rules"].as_array_mut().unwrap().iter_mut().enumerate() {
        rule["delay_ms"] = Value::from((i * 7 % 5) as u64);
    }
    let template = PromptTemplate::default();
    let settings = PipelineSettings::default();
    let mut baseline: Option<Vec<Vec<JudgmentRecord>>> = None;
    for limit in [1, 4, 16] {
        let qa = Arc::new(ScriptedBackend::from_json(&script.to_string()).map_err(|e| e.to_string())?);
        let judge = Arc::new(ScriptedBackend::from_json(&script.to_string()).map_err(|e| e.to_string())?);
        let backends = StepBackends {
            query_analysis: qa.clone(),
            doc_analysis: judge.clone(),
            judgment: judge.clone(),
        };
        let cache = QueryAnalysisCache::in_memory();
        let mut all = Vec::new();
        for q in &queries {
            let list = index.retrieve_topk(&q.query_id, q.retrieval_text(), 100).map_err(|e| e.to_string())?;
            let run = run_pipeline(&backends, &template, q, &list.entries, &corpus, &cache, &settings, limit)
                .await
                .map_err(|e| e.to_string())?;
            let records: Vec<JudgmentRecord> = run.outcomes.iter().map(|o| o.judged().cloned().ok_or("unexpected failure")).collect::<Result<_, _>>()?;
            let order: Vec<&str> = records.iter().map(|r| r.doc_id.as_str()).collect();
            let want: Vec<&str> = list.entries.iter().map(|c| c.doc_id.as_str()).collect();
            ensure!(order == want, "limit {limit}: outcomes not in first-stage order");
            all.push(records);
        }
        ensure!(qa.call_count() == queries.len(), "limit {limit}: {} query-analysis calls for {} queries", qa.call_count(), queries.len());
        if limit > 1 {
            ensure!(judge.peak_in_flight() > 1, "limit {limit}: calls never overlapped");
        }
        ensure!(judge.peak_in_flight() <= limit, "limit {limit}: {} calls in flight", judge.peak_in_flight());
        match &baseline {
            None => baseline = Some(all),
            Some(b) => {
                let bits = |v: &Vec<Vec<JudgmentRecord>>| {
                    v.iter().flatten().map(|r| (r.p_yes.to_bits(), r.p_no.to_bits(), serde_json::to_string(r).unwrap())).collect::<Vec<_>>()
                };
                ensure!(bits(b) == bits(&all), "limit {limit}: judgments differ from limit 1");
            }
        }
    }
    Ok("limits 1, 4, 16 give bit-identical judgments; one query-analysis call per query".into())
}

fn criterion_8() -> Outcome {
    let record = |q: usize, d: usize, yes: bool| JudgmentRecord {
        query_id: format!("q{q}"),
        doc_id: format!("d{d}"),
        p_yes: if yes { 0.7 } else { 0.2 },
        p_no: if yes { 0.2 } else { 0.7 },
        verdict_text: String::new(),
        model: "m".into(),
        template_hash: "h".into(),
        query_analysis: None,
        doc_summary: None,
        doc_discussion: None,
        truncated: false,
    };
    let mut r = rng(8);
    for inst in 0..200 {
        let n = r.random_range(1..300);
        let a: Vec<_> = (0..n).map(|i| record(i % 7, i, r.random_bool(0.5))).collect();
        let mut b = Vec::new();
        for i in 0..n {
            if r.random_bool(0.9) {
                b.push(record(i % 7, i, r.random_bool(0.3)));
            }
        }
        let shared: HashSet<usize> = b.iter().map(|x| x.doc_id[1..].parse().unwrap()).collect();
        if shared.is_empty() {
            continue;
        }
        let m = agreement(&a, &b).map_err(|e| e.to_string())?;
        let total: f64 = m.percentages().iter().sum();
        ensure!((total - 100.0).abs() <= 0.01, "instance {inst}: percentages sum to {total}");
        ensure!(m.shared() == shared.len(), "instance {inst}: shared count");
        let same = agreement(&a, &a).map_err(|e| e.to_string())?;
        ensure!(same.yes_no == 0 && same.no_yes == 0, "instance {inst}: identity has off-diagonal mass");
        let [_, yn, ny, _] = same.percentages();
        ensure!(yn == 0.0 && ny == 0.0, "instance {inst}: identity off-diagonal percentages");
    }
    Ok("percentages sum to 100 +- 0.01; identity pairs have 0% off-diagonal".into())
}

async fn criterion_9() -> Option<Outcome> {
    let endpoint = std::env::var("JUDGERANK_LIVE_ENDPOINT").ok()?;
    let model = match std::env::var("JUDGERANK_LIVE_MODEL") {
        Ok(m) => m,
        Err(_) => return Some(Err("JUDGERANK_LIVE_MODEL is not set".into())),
    };
    let key = std::env::var("JUDGERANK_LIVE_API_KEY_ENV")
        .map(|v| format!(", api_key_env = {v:?}"))
        .unwrap_or_default();
    let out = tempfile::tempdir().ok()?;
    let text = std::fs::read_to_string(common::fixture("config.toml")).ok()?;
    let backend = format!("{{ kind = \"openai\", endpoint = {endpoint:?}, model = {model:?}, max_in_flight = 4{key} }}");
    let text = text
        .replace("output_dir = \"out\"", &format!("output_dir = {:?}", out.path().display().to_string()))
        .replace("{ kind = \"scripted\", script = \"script.json\" }", &backend)
        .replace("name = \"scripted\"", "name = \"live\"")
        .replace("modes = [\"discrete\", \"continuous\", \"hybrid\"]", "modes = [\"hybrid\"]");
    let run = async {
        let config = judgerank::config::RunConfig::from_toml(&text, &common::fixture_dir()).map_err(|e| e.to_string())?;
        let backends = ResolvedBackends::from_config(&config).map_err(|e| e.to_string())?;
        let summary = cmd_rerank(&config, &backends, Execution::default()).await.map_err(|e| e.to_string())?;
        let input = |run: &std::path::Path| EvalInput {
            dataset: "tiny".into(),
            run: run.to_path_buf(),
            qrels: common::fixture("qrels.tsv"),
        };
        let reports = cmd_eval(
            &[input(&summary.first_stage), input(&summary.members[0].run_files[0])],
            EvalOptions::default(),
            Execution::default(),
        )
        .map_err(|e| e.to_string())?;
        let (bm25, hybrid) = (reports[0].macro_average, reports[1].macro_average);
        ensure!(hybrid >= bm25, "hybrid nDCG@10 {hybrid:.4} below first stage {bm25:.4}");
        Ok(format!("{model}: first stage {bm25:.4}, hybrid {hybrid:.4}"))
    };
    Some(run.await)
}

fn report(n: u32, limit: Duration, started: Instant, outcome: Option<Outcome>) -> bool {
    let elapsed = started.elapsed();
    let (status, detail, ok) = match outcome {
        None => ("SKIP", "live endpoint not configured (set JUDGERANK_LIVE_ENDPOINT)".to_string(), true),
        Some(Ok(d)) if elapsed <= limit => ("PASS", d, true),
        Some(Ok(d)) => ("FAIL", format!("over time limit; {d}"), false),
        Some(Err(e)) => ("FAIL", e, false),
    };
    // Written to the stderr handle directly: the test harness only captures the
    // print macros, so these lines show up in a plain `cargo test` run.
    let line = format!("criterion {n}: {status} ({:.3}s / limit {:.0}s) {detail}\n", elapsed.as_secs_f64(), limit.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
    ok
}

#[test]
fn acceptance_criteria() {
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let secs = Duration::from_secs;
    let mut ok = true;

    let t = Instant::now();
    ok &= report(1, secs(1), t, Some(criterion_1()));
    let t = Instant::now();
    ok &= report(2, secs(5), t, Some(criterion_2()));
    let t = Instant::now();
    ok &= report(3, secs(5), t, Some(criterion_3()));
    let t = Instant::now();
    ok &= report(4, secs(30), t, Some(criterion_4()));
    let t = Instant::now();
    ok &= report(5, secs(5), t, Some(criterion_5()));
    let t = Instant::now();
    ok &= report(6, secs(2), t, Some(rt.block_on(criterion_6())));
    let t = Instant::now();
    ok &= report(7, secs(5), t, Some(rt.block_on(criterion_7())));
    let t = Instant::now();
    ok &= report(8, secs(1), t, Some(criterion_8()));
    let t = Instant::now();
    let live = rt.block_on(criterion_9());
    ok &= report(9, secs(600), t, live);

    assert!(ok, "one or more acceptance criteria failed");
}
