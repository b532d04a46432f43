//! Batch commands tying ingest, retrieval, the judgment pipeline, scoring and
//! evaluation together. Each command is idempotent for identical inputs and
//! writes its outputs atomically.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use futures::stream::{self, StreamExt};

use crate::backend::ChatBackend;
use crate::bm25::{read_index, write_index, Bm25Error, Bm25Index, Bm25Params, CandidateList};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{agreement, evaluate_run, AgreementMatrix, EvalError, EvalOptions, EvalReport};
use crate::exec::Execution;
use crate::ingest::{
    format_run, read_corpus, read_qrels, read_queries, read_run, Corpus, IngestError, Query, RunStrictness,
};
use crate::pipeline::{
    analyze_query, run_pipeline, Clock, DocFailure, JudgmentRecord, PipelineError, PromptTemplate,
    QueryAnalysisCache, StepBackends, Variant,
};
use crate::scoring::{
    ensemble_tag, normalize_prob, rank_continuous, rank_discrete, rank_ensemble, rank_hybrid, RankedRun,
    ScoringConfig, ScoringError, ScoringMode, Verdict,
};

/// Tag written on first-stage run rows.
pub const FIRST_STAGE_TAG: &str = "bm25";

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Bm25(#[from] Bm25Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Judgments {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{source_name}: no judgment for query `{query_id}` doc `{doc_id}`")]
    MissingJudgment {
        source_name: String,
        query_id: String,
        doc_id: String,
    },
    #[error("{} document(s) could not be judged (first: query `{}` doc `{}`: {}); judgments so far are saved, rerun to resume", .0.len(), .0[0].query_id, .0[0].doc_id, .0[0].message)]
    DocFailures(Vec<DocFailure>),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkflowError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

/// One JSON object per line.
pub fn format_judgments(records: &[JudgmentRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("judgment serializes"));
        out.push('\n');
    }
    out
}

/// Parse a judgments file. A final line cut off mid-write (no trailing
/// newline, invalid JSON) is dropped with a warning; any other bad line is an
/// error.
pub fn parse_judgments(text: &str, path: &Path) -> Result<Vec<JudgmentRecord>, WorkflowError> {
    let mut records = Vec::new();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JudgmentRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) if i + 1 == lines.len() && !complete => {
                log::warn!("{}:{}: dropping incomplete last line", path.display(), i + 1);
            }
            Err(e) => {
                return Err(WorkflowError::Judgments {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}

pub fn read_judgments(path: &Path) -> Result<Vec<JudgmentRecord>, WorkflowError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_judgments(&text, path)
}

fn read_judgments_if_present(path: &Path) -> Result<Vec<JudgmentRecord>, WorkflowError> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_judgments(&text, path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io_err(path)(e)),
    }
}

pub fn cmd_index(corpus: &Path, params: Bm25Params, out: &Path, exec: Execution) -> Result<Bm25Index, WorkflowError> {
    let docs = read_corpus(corpus)?;
    let index = Bm25Index::build_with(&docs, params, exec)?;
    let mut bytes = Vec::new();
    write_index(&mut bytes, &index)?;
    write_atomic(out, &bytes)?;
    Ok(index)
}

pub fn load_index(path: &Path) -> Result<Bm25Index, WorkflowError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(read_index(std::io::BufReader::new(file))?)
}

fn write_first_stage(lists: &[CandidateList], out: &Path) -> Result<(), WorkflowError> {
    let rows: Vec<_> = lists.iter().flat_map(|l| l.to_run_entries(FIRST_STAGE_TAG)).collect();
    write_atomic(out, format_run(&rows)?.as_bytes())
}

/// Retrieve the top `k` for every query and write a first-stage run file.
pub fn cmd_retrieve(
    index: &Bm25Index,
    queries: &Path,
    k: usize,
    out: &Path,
    exec: Execution,
) -> Result<Vec<CandidateList>, WorkflowError> {
    let queries = read_queries(queries)?;
    let lists = index.retrieve_batch(&queries, k, exec)?;
    write_first_stage(&lists, out)?;
    Ok(lists)
}

/// One judge model ready to run.
#[derive(Clone, Debug)]
pub struct ResolvedJudge {
    pub name: String,
    pub backends: StepBackends,
}

/// Live backends for a run, built from the config or injected by tests.
#[derive(Clone, Debug)]
pub struct ResolvedBackends {
    pub query_analysis: Arc<dyn ChatBackend>,
    pub judges: Vec<ResolvedJudge>,
}

impl ResolvedBackends {
    pub fn from_config(config: &RunConfig) -> Result<Self, WorkflowError> {
        let query_analysis = config.query_analysis.backend.build()?;
        let mut judges = Vec::new();
        for j in &config.judges {
            let doc = j.backend.build()?;
            let judgment = match &j.judgment_backend {
                Some(spec) => spec.build()?,
                None => doc.clone(),
            };
            judges.push(ResolvedJudge {
                name: j.name.clone(),
                backends: StepBackends {
                    query_analysis: query_analysis.clone(),
                    doc_analysis: doc,
                    judgment,
                },
            });
        }
        Ok(ResolvedBackends { query_analysis, judges })
    }

    fn judge(&self, name: &str) -> Result<&ResolvedJudge, WorkflowError> {
        self.judges
            .iter()
            .find(|j| j.name == name)
            .ok_or_else(|| ConfigError::Invalid(format!("no backend resolved for judge `{name}`")).into())
    }
}

fn open_cache(config: &RunConfig, backends: &ResolvedBackends) -> Result<QueryAnalysisCache, WorkflowError> {
    let path = config.query_analysis_cache_path(backends.query_analysis.model());
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(QueryAnalysisCache::open(path)?.with_clock(Clock::from_env()))
}

/// Fill the query-analysis cache for every query; returns how many analyses
/// were newly generated.
pub async fn cmd_analyze_queries(config: &RunConfig, backends: &ResolvedBackends) -> Result<usize, WorkflowError> {
    let template = config.template.load()?;
    let queries = read_queries(&config.data.queries)?;
    let cache = open_cache(config, backends)?;
    let before = cache.len();
    let backend = &*backends.query_analysis;
    let results: Vec<Result<_, PipelineError>> = stream::iter(&queries)
        .map(|q| analyze_query(backend, &template, q, &cache, &config.pipeline))
        .buffer_unordered(config.concurrency)
        .collect()
        .await;
    for r in results {
        r?;
    }
    Ok(cache.len() - before)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberSummary {
    pub label: String,
    pub judgments_path: PathBuf,
    pub reused: usize,
    pub generated: usize,
    pub dropped_stale: usize,
    pub failures: Vec<DocFailure>,
    pub run_files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankSummary {
    pub first_stage: PathBuf,
    pub members: Vec<MemberSummary>,
}

/// First-stage retrieval for the configured dataset, written to
/// `{dataset}.first-stage.bm25.run` and read back, so every later stage sees
/// exactly the scores stored in the file.
pub fn first_stage(config: &RunConfig, corpus: &Corpus, queries: &[Query], exec: Execution) -> Result<(PathBuf, BTreeMap<String, CandidateList>), WorkflowError> {
    let index = Bm25Index::build_with(corpus.documents(), config.bm25.params(), exec)?;
    let lists = index.retrieve_batch(queries, config.bm25.k, exec)?;
    let path = config.output_path("first-stage", FIRST_STAGE_TAG, "run");
    write_first_stage(&lists, &path)?;
    let (rows, _) = read_run(&path, RunStrictness::Strict)?;
    Ok((path, CandidateList::from_run_entries(&rows, config.bm25.k)))
}

fn canonical_order(records: &mut [JudgmentRecord], lists: &BTreeMap<String, CandidateList>) {
    let rank = |r: &JudgmentRecord| {
        lists
            .get(&r.query_id)
            .and_then(|l| l.entries.iter().find(|c| c.doc_id == r.doc_id))
            .map_or(u32::MAX, |c| c.first_stage_rank)
    };
    records.sort_by(|a, b| {
        a.query_id
            .cmp(&b.query_id)
            .then(rank(a).cmp(&rank(b)))
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

/// Ranked runs for every query from one set of judgments.
pub fn rank_from_judgments(
    lists: &BTreeMap<String, CandidateList>,
    judgments: &[JudgmentRecord],
    scoring: ScoringConfig,
    label: &str,
) -> Result<Vec<RankedRun>, WorkflowError> {
    let by_pair: HashMap<(&str, &str), &JudgmentRecord> =
        judgments.iter().map(|r| ((r.query_id.as_str(), r.doc_id.as_str()), r)).collect();
    let tag = scoring.tag(label);
    let mut runs = Vec::with_capacity(lists.len());
    for list in lists.values() {
        let mut found = Vec::with_capacity(list.entries.len());
        for c in &list.entries {
            let r = by_pair
                .get(&(list.query_id.as_str(), c.doc_id.as_str()))
                .ok_or_else(|| WorkflowError::MissingJudgment {
                    source_name: label.to_string(),
                    query_id: list.query_id.clone(),
                    doc_id: c.doc_id.clone(),
                })?;
            found.push(*r);
        }
        let run = match scoring.mode {
            ScoringMode::Discrete => {
                let v: Vec<_> = found.iter().map(|r| Verdict::from_probs(r.p_yes, r.p_no)).collect();
                rank_discrete(list, &v, &tag)?
            }
            ScoringMode::Continuous => {
                let p: Vec<_> = found.iter().map(|r| normalize_prob(r.p_yes, r.p_no)).collect();
                rank_continuous(list, &p, &tag)?
            }
            ScoringMode::Hybrid => {
                let p: Vec<_> = found.iter().map(|r| normalize_prob(r.p_yes, r.p_no)).collect();
                rank_hybrid(list, &p, scoring.alpha, &tag)?
            }
        };
        runs.push(run);
    }
    Ok(runs)
}

pub fn write_ranked_runs(runs: &[RankedRun], out: &Path) -> Result<(), WorkflowError> {
    let rows: Vec<_> = runs.iter().flat_map(RankedRun::to_run_entries).collect();
    write_atomic(out, format_run(&rows)?.as_bytes())
}

/// Judge every first-stage candidate with every configured judge and write a
/// run file per scoring mode.
///
/// Judgments already on disk for the same (query, doc, model, template) are
/// reused, so an interrupted run resumes where it stopped and a completed run
/// makes no backend calls. New judgments are appended as each query finishes;
/// the file is rewritten in canonical order at the end. If any document fails,
/// the judgments are still saved but no run files are written for that judge
/// and the command returns [`WorkflowError::DocFailures`].
pub async fn cmd_rerank(config: &RunConfig, backends: &ResolvedBackends, exec: Execution) -> Result<RerankSummary, WorkflowError> {
    let template = config.template.load()?;
    let corpus = Corpus::new(read_corpus(&config.data.corpus)?)?;
    let queries = read_queries(&config.data.queries)?;
    let (first_stage_path, lists) = first_stage(config, &corpus, &queries, exec)?;
    for q in &queries {
        if !lists.contains_key(&q.query_id) {
            log::warn!("query `{}` retrieved no candidates; it is left out of reranked runs", q.query_id);
        }
    }
    let cache = match config.pipeline.variant {
        Variant::Analyses => open_cache(config, backends)?,
        Variant::Direct => QueryAnalysisCache::in_memory(),
    };
    let mut members = Vec::new();
    let mut all_failures = Vec::new();
    for spec in &config.judges {
        let judge = backends.judge(&spec.name)?;
        let label = config.member_label(spec);
        let summary = rerank_member(config, &template, &corpus, &queries, &lists, &cache, judge, &label).await?;
        all_failures.extend(summary.failures.iter().cloned());
        members.push(summary);
    }
    if !all_failures.is_empty() {
        return Err(WorkflowError::DocFailures(all_failures));
    }
    Ok(RerankSummary {
        first_stage: first_stage_path,
        members,
    })
}

/// Judgments written and documents that failed, for one query.
type QueryOutcome = (Vec<JudgmentRecord>, Vec<DocFailure>);

#[allow(clippy::too_many_arguments)]
async fn rerank_member(
    config: &RunConfig,
    template: &PromptTemplate,
    corpus: &Corpus,
    queries: &[Query],
    lists: &BTreeMap<String, CandidateList>,
    cache: &QueryAnalysisCache,
    judge: &ResolvedJudge,
    label: &str,
) -> Result<MemberSummary, WorkflowError> {
    let path = config.output_path("judgments", label, "jsonl");
    let model = judge.backends.judgment.model().to_string();
    let (mut records, stale): (Vec<_>, Vec<_>) = read_judgments_if_present(&path)?
        .into_iter()
        .partition(|r| r.model == model && r.template_hash == template.hash());
    if !stale.is_empty() {
        log::warn!(
            "{}: dropping {} judgment(s) from a different model or prompt template",
            path.display(),
            stale.len()
        );
    }
    canonical_order(&mut records, lists);
    write_atomic(&path, format_judgments(&records).as_bytes())?;
    let reused = records.len();
    let done: HashSet<(String, String)> = records.iter().map(|r| (r.query_id.clone(), r.doc_id.clone())).collect();

    let by_id: HashMap<&str, &Query> = queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut work = Vec::new();
    for list in lists.values() {
        let Some(query) = by_id.get(list.query_id.as_str()) else {
            log::warn!("first-stage query `{}` is not in the query file; skipped", list.query_id);
            continue;
        };
        let pending: Vec<_> = list
            .entries
            .iter()
            .filter(|c| !done.contains(&(list.query_id.clone(), c.doc_id.clone())))
            .cloned()
            .collect();
        if !pending.is_empty() {
            work.push((*query, pending));
        }
    }

    let file = std::fs::OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
    let sink = Mutex::new(file);
    let outcomes: Vec<Result<QueryOutcome, WorkflowError>> = stream::iter(&work)
        .map(|(query, pending)| {
            let sink = &sink;
            let path = &path;
            async move {
                let run = match run_pipeline(
                    &judge.backends,
                    template,
                    query,
                    pending,
                    corpus,
                    cache,
                    &config.pipeline,
                    config.concurrency,
                )
                .await
                {
                    Ok(run) => run,
                    Err(e) => {
                        log::warn!("query `{}`: {e}", query.query_id);
                        let failures = pending
                            .iter()
                            .map(|c| DocFailure {
                                query_id: query.query_id.clone(),
                                doc_id: c.doc_id.clone(),
                                message: e.to_string(),
                            })
                            .collect();
                        return Ok((Vec::new(), failures));
                    }
                };
                let judged: Vec<JudgmentRecord> = run.outcomes.iter().filter_map(|o| o.judged().cloned()).collect();
                let failures: Vec<DocFailure> = run.failures().cloned().collect();
                let mut f = sink.lock().expect("judgment sink");
                f.write_all(format_judgments(&judged).as_bytes()).map_err(io_err(path))?;
                f.flush().map_err(io_err(path))?;
                Ok((judged, failures))
            }
        })
        .buffer_unordered(config.concurrency)
        .collect()
        .await;
    drop(sink);

    let mut generated = 0;
    let mut failures = Vec::new();
    for o in outcomes {
        let (judged, failed) = o?;
        generated += judged.len();
        records.extend(judged);
        failures.extend(failed);
    }
    failures.sort_by(|a, b| (&a.query_id, &a.doc_id).cmp(&(&b.query_id, &b.doc_id)));
    canonical_order(&mut records, lists);
    write_atomic(&path, format_judgments(&records).as_bytes())?;

    let mut run_files = Vec::new();
    if failures.is_empty() {
        for mode in &config.scoring.modes {
            let scoring = ScoringConfig::new(*mode).with_alpha(config.scoring.alpha);
            let runs = rank_from_judgments(lists, &records, scoring, label)?;
            let out = config.output_path("rerank", &scoring.tag(label), "run");
            write_ranked_runs(&runs, &out)?;
            run_files.push(out);
        }
    }
    Ok(MemberSummary {
        label: label.to_string(),
        judgments_path: path,
        reused,
        generated,
        dropped_stale: stale.len(),
        failures,
        run_files,
    })
}

/// Normalized judge score per (query_id, doc_id).
type ScoreMap<'a> = HashMap<(&'a str, &'a str), f64>;

/// Hybrid ranking on judge scores averaged across judgment files.
///
/// Every first-stage candidate must be judged in every file.
pub fn ensemble_runs(
    first_stage: &[crate::ingest::RunEntry],
    judgment_sets: &[(String, Vec<JudgmentRecord>)],
    alpha: f64,
) -> Result<Vec<RankedRun>, WorkflowError> {
    if judgment_sets.is_empty() {
        return Err(ScoringError::EmptyEnsemble.into());
    }
    let lists = CandidateList::from_run_entries(first_stage, usize::MAX);
    let maps: Vec<(&str, ScoreMap)> = judgment_sets
        .iter()
        .map(|(name, records)| {
            let m = records
                .iter()
                .map(|r| ((r.query_id.as_str(), r.doc_id.as_str()), normalize_prob(r.p_yes, r.p_no)))
                .collect();
            (name.as_str(), m)
        })
        .collect();
    let tag = ensemble_tag(alpha);
    let mut runs = Vec::with_capacity(lists.len());
    for list in lists.values() {
        let mut per_model = Vec::with_capacity(maps.len());
        for (name, m) in &maps {
            let mut scores = Vec::with_capacity(list.entries.len());
            for c in &list.entries {
                let s = m.get(&(list.query_id.as_str(), c.doc_id.as_str())).ok_or_else(|| {
                    WorkflowError::MissingJudgment {
                        source_name: name.to_string(),
                        query_id: list.query_id.clone(),
                        doc_id: c.doc_id.clone(),
                    }
                })?;
                scores.push(*s);
            }
            per_model.push(scores);
        }
        runs.push(rank_ensemble(list, &per_model, alpha, &tag)?);
    }
    Ok(runs)
}

pub fn cmd_ensemble(judgment_files: &[PathBuf], first_stage: &Path, alpha: f64, out: &Path) -> Result<Vec<RankedRun>, WorkflowError> {
    let (rows, _) = read_run(first_stage, RunStrictness::Strict)?;
    let mut sets = Vec::new();
    for p in judgment_files {
        sets.push((p.display().to_string(), read_judgments(p)?));
    }
    let runs = ensemble_runs(&rows, &sets, alpha)?;
    write_ranked_runs(&runs, out)?;
    Ok(runs)
}

pub fn cmd_agreement(a: &Path, b: &Path) -> Result<AgreementMatrix, WorkflowError> {
    Ok(agreement(&read_judgments(a)?, &read_judgments(b)?)?)
}

/// One run file to score, with the dataset it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub dataset: String,
    pub run: PathBuf,
    pub qrels: PathBuf,
}

/// Evaluate run files and group the results by run tag, tags in order of
/// first appearance.
pub fn cmd_eval(inputs: &[EvalInput], options: EvalOptions, exec: Execution) -> Result<Vec<EvalReport>, WorkflowError> {
    let mut qrels_cache = HashMap::new();
    let mut by_tag: Vec<(String, Vec<_>)> = Vec::new();
    for input in inputs {
        if !qrels_cache.contains_key(&input.qrels) {
            qrels_cache.insert(input.qrels.clone(), read_qrels(&input.qrels)?);
        }
        let (rows, warnings) = read_run(&input.run, RunStrictness::Lenient)?;
        for w in warnings {
            log::warn!("{}: {w}", input.run.display());
        }
        let report = evaluate_run(&input.dataset, &rows, &qrels_cache[&input.qrels], options, exec)?;
        match by_tag.iter_mut().find(|(t, _)| *t == report.tag) {
            Some((_, v)) => v.push(report),
            None => by_tag.push((report.tag.clone(), vec![report])),
        }
    }
    Ok(by_tag
        .into_iter()
        .map(|(tag, datasets)| EvalReport::new(&tag, options.k, datasets))
        .collect())
}
