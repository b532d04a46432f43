use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::{
    extract_yes_no_probs, DocumentAnalysis, JudgmentRecord, PipelineError, PromptInputs,
    PromptTemplate, QueryAnalysis, QueryAnalysisCache, Step,
};
use crate::backend::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::bm25::Candidate;
use crate::ingest::{Corpus, Document, Query};

/// Which query text the LLM steps see.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTextPolicy {
    #[default]
    Original,
    /// `augmented_text` when present, else the original text.
    Augmented,
}

impl QueryTextPolicy {
    pub fn select(self, query: &Query) -> &str {
        match self {
            QueryTextPolicy::Original => &query.text,
            QueryTextPolicy::Augmented => query.retrieval_text(),
        }
    }
}

/// Full three-step pipeline, or the judgment step alone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Analyses,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub variant: Variant,
    pub query_text: QueryTextPolicy,
    /// Character budget a document is cut to after a context-length error.
    pub truncate_chars: usize,
    pub analysis_max_tokens: u32,
    pub judgment_top_logprobs: u8,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            variant: Variant::Analyses,
            query_text: QueryTextPolicy::Original,
            truncate_chars: 24_000,
            analysis_max_tokens: 1024,
            judgment_top_logprobs: 5,
        }
    }
}

/// Backends per step; the query-analysis model may differ from the others.
#[derive(Clone)]
pub struct StepBackends {
    pub query_analysis: Arc<dyn ChatBackend>,
    pub doc_analysis: Arc<dyn ChatBackend>,
    pub judgment: Arc<dyn ChatBackend>,
}

impl StepBackends {
    pub fn uniform(backend: Arc<dyn ChatBackend>) -> Self {
        StepBackends {
            query_analysis: backend.clone(),
            doc_analysis: backend.clone(),
            judgment: backend,
        }
    }
}

impl std::fmt::Debug for StepBackends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StepBackends")
            .field("query_analysis", &self.query_analysis.model())
            .field("doc_analysis", &self.doc_analysis.model())
            .field("judgment", &self.judgment.model())
            .finish()
    }
}

fn analysis_request(template: &PromptTemplate, step: Step, inputs: &PromptInputs<'_>, max_tokens: u32) -> Result<ChatRequest, PipelineError> {
    let prompt = template.render(step, inputs)?;
    Ok(ChatRequest {
        system_prompt: prompt.system,
        user_prompt: prompt.user,
        max_new_tokens: max_tokens,
        temperature: 0.0,
        top_logprobs: 0,
    })
}

fn backend_err(step: Step) -> impl FnOnce(BackendError) -> PipelineError {
    move |source| PipelineError::Backend { step, source }
}

/// Head of `text` holding at most `budget` characters.
fn head_chars(text: &str, budget: usize) -> &str {
    match text.char_indices().nth(budget) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Return the cached analysis or ask the query-analysis backend and store it.
pub async fn analyze_query(
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    query: &Query,
    cache: &QueryAnalysisCache,
    settings: &PipelineSettings,
) -> Result<QueryAnalysis, PipelineError> {
    if let Some(hit) = cache.get(&query.query_id) {
        return Ok(hit);
    }
    let text = settings.query_text.select(query);
    if text.trim().is_empty() {
        return Err(PipelineError::EmptyQuery(query.query_id.clone()));
    }
    let request = analysis_request(
        template,
        Step::QueryAnalysis,
        &PromptInputs {
            query: Some(text),
            ..Default::default()
        },
        settings.analysis_max_tokens,
    )?;
    let reply = backend
        .complete(&request)
        .await
        .map_err(backend_err(Step::QueryAnalysis))?;
    if reply.text.trim().is_empty() {
        return Err(PipelineError::EmptyAnalysis(query.query_id.clone()));
    }
    let analysis = QueryAnalysis {
        query_id: query.query_id.clone(),
        analysis_text: reply.text,
        model: backend.model().to_string(),
        created_at: cache.clock().now(),
    };
    cache.insert(analysis.clone())?;
    Ok(analysis)
}

/// Send a request built from `doc_text`; on a context-length error, cut the
/// document to the truncation budget and try exactly once more.
async fn with_truncation<F>(
    backend: &dyn ChatBackend,
    step: Step,
    doc_text: &str,
    budget: usize,
    build: F,
) -> Result<(ChatResponse, String, bool), PipelineError>
where
    F: Fn(&str) -> Result<ChatRequest, PipelineError>,
{
    match backend.complete(&build(doc_text)?).await {
        Ok(r) => Ok((r, doc_text.to_string(), false)),
        Err(BackendError::ContextLength(msg)) => {
            let cut = head_chars(doc_text, budget);
            log::warn!("{step}: context length exceeded ({msg}); retrying with {} chars", cut.chars().count());
            let r = backend
                .complete(&build(cut)?)
                .await
                .map_err(backend_err(step))?;
            Ok((r, cut.to_string(), true))
        }
        Err(e) => Err(backend_err(step)(e)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzedDocument {
    pub analysis: DocumentAnalysis,
    /// Document text the analysis saw (the truncated head if truncation happened).
    pub doc_text: String,
    pub truncated: bool,
}

pub async fn analyze_document(
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    query: &Query,
    query_analysis: &QueryAnalysis,
    document: &Document,
    settings: &PipelineSettings,
) -> Result<AnalyzedDocument, PipelineError> {
    let doc_text = document.full_text();
    if doc_text.trim().is_empty() {
        return Err(PipelineError::EmptyDocument(document.doc_id.clone()));
    }
    let query_text = settings.query_text.select(query);
    let (reply, used, truncated) = with_truncation(
        backend,
        Step::DocAnalysis,
        &doc_text,
        settings.truncate_chars,
        |doc| {
            analysis_request(
                template,
                Step::DocAnalysis,
                &PromptInputs {
                    query: Some(query_text),
                    query_analysis: Some(&query_analysis.analysis_text),
                    document: Some(doc),
                    doc_analysis: None,
                },
                settings.analysis_max_tokens,
            )
        },
    )
    .await?;
    Ok(AnalyzedDocument {
        analysis: DocumentAnalysis::from_reply(&query.query_id, &document.doc_id, &reply.text),
        doc_text: used,
        truncated,
    })
}

/// Ask for a one-word verdict and read `p_yes` / `p_no` from the first token.
///
/// With `query_analysis` and `doc_analysis` both absent the direct-judgment
/// prompt is used; otherwise both must be present.
#[allow(clippy::too_many_arguments)]
pub async fn judge(
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    query: &Query,
    query_analysis: Option<&QueryAnalysis>,
    doc_id: &str,
    doc_text: &str,
    doc_analysis: Option<&DocumentAnalysis>,
    settings: &PipelineSettings,
) -> Result<JudgmentRecord, PipelineError> {
    if doc_text.trim().is_empty() {
        return Err(PipelineError::EmptyDocument(doc_id.to_string()));
    }
    let step = if query_analysis.is_none() && doc_analysis.is_none() {
        Step::DirectJudgment
    } else {
        Step::Judgment
    };
    let query_text = settings.query_text.select(query);
    let doc_analysis_text = doc_analysis.map(DocumentAnalysis::prompt_text);
    let top_logprobs = settings.judgment_top_logprobs.max(5);
    let (reply, _, truncated) = with_truncation(backend, step, doc_text, settings.truncate_chars, |doc| {
        let prompt = template.render(
            step,
            &PromptInputs {
                query: Some(query_text),
                query_analysis: query_analysis.map(|q| q.analysis_text.as_str()),
                document: Some(doc),
                doc_analysis: doc_analysis_text.as_deref(),
            },
        )?;
        Ok(ChatRequest {
            system_prompt: prompt.system,
            user_prompt: prompt.user,
            max_new_tokens: 1,
            temperature: 0.0,
            top_logprobs,
        })
    })
    .await?;
    let (p_yes, p_no) = extract_yes_no_probs(&reply.first_token_alternatives);
    Ok(JudgmentRecord {
        query_id: query.query_id.clone(),
        doc_id: doc_id.to_string(),
        p_yes,
        p_no,
        verdict_text: reply.text,
        model: backend.model().to_string(),
        template_hash: template.hash().to_string(),
        query_analysis: query_analysis.map(|q| q.analysis_text.clone()),
        doc_summary: doc_analysis.map(|d| d.extractive_summary.clone()),
        doc_discussion: doc_analysis.map(|d| d.relevance_discussion.clone()),
        truncated,
    })
}

/// A candidate the pipeline could not judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocFailure {
    pub query_id: String,
    pub doc_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DocOutcome {
    Judged(JudgmentRecord),
    Failed(DocFailure),
}

impl DocOutcome {
    pub fn judged(&self) -> Option<&JudgmentRecord> {
        match self {
            DocOutcome::Judged(r) => Some(r),
            DocOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRun {
    pub query_analysis: Option<QueryAnalysis>,
    /// One outcome per candidate, in the order the candidates were given.
    pub outcomes: Vec<DocOutcome>,
}

impl QueryRun {
    pub fn failures(&self) -> impl Iterator<Item = &DocFailure> {
        self.outcomes.iter().filter_map(|o| match o {
            DocOutcome::Failed(f) => Some(f),
            DocOutcome::Judged(_) => None,
        })
    }
}

async fn process_candidate(
    backends: &StepBackends,
    template: &PromptTemplate,
    query: &Query,
    query_analysis: Option<&QueryAnalysis>,
    candidate: &Candidate,
    corpus: &Corpus,
    settings: &PipelineSettings,
) -> Result<JudgmentRecord, PipelineError> {
    let document = corpus
        .get(&candidate.doc_id)
        .ok_or_else(|| PipelineError::UnknownDocument(candidate.doc_id.clone()))?;
    match query_analysis {
        None => {
            let text = document.full_text();
            judge(&*backends.judgment, template, query, None, &document.doc_id, &text, None, settings).await
        }
        Some(qa) => {
            let analyzed =
                analyze_document(&*backends.doc_analysis, template, query, qa, document, settings).await?;
            let mut record = judge(
                &*backends.judgment,
                template,
                query,
                Some(qa),
                &document.doc_id,
                &analyzed.doc_text,
                Some(&analyzed.analysis),
                settings,
            )
            .await?;
            record.truncated |= analyzed.truncated;
            Ok(record)
        }
    }
}

/// Run every step for one query.
///
/// Query analysis runs once; document analysis and judgment run for up to
/// `concurrency_limit` candidates at a time. Outcomes come back in candidate
/// order whatever order the calls complete in. A failing candidate becomes a
/// [`DocOutcome::Failed`]; only a query-analysis failure fails the whole query.
#[allow(clippy::too_many_arguments)]
pub async fn run_pipeline(
    backends: &StepBackends,
    template: &PromptTemplate,
    query: &Query,
    candidates: &[Candidate],
    corpus: &Corpus,
    cache: &QueryAnalysisCache,
    settings: &PipelineSettings,
    concurrency_limit: usize,
) -> Result<QueryRun, PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::NoCandidates(query.query_id.clone()));
    }
    let query_analysis = match settings.variant {
        Variant::Analyses => {
            Some(analyze_query(&*backends.query_analysis, template, query, cache, settings).await?)
        }
        Variant::Direct => None,
    };
    let qa = query_analysis.as_ref();
    let mut indexed: Vec<(usize, DocOutcome)> = stream::iter(candidates.iter().enumerate())
        .map(|(i, candidate)| async move {
            let outcome = match process_candidate(backends, template, query, qa, candidate, corpus, settings).await {
                Ok(record) => DocOutcome::Judged(record),
                Err(e) => {
                    log::warn!("query {} doc {}: {e}", query.query_id, candidate.doc_id);
                    DocOutcome::Failed(DocFailure {
                        query_id: query.query_id.clone(),
                        doc_id: candidate.doc_id.clone(),
                        message: e.to_string(),
                    })
                }
            };
            (i, outcome)
        })
        .buffer_unordered(concurrency_limit.max(1))
        .collect()
        .await;
    indexed.sort_by_key(|(i, _)| *i);
    Ok(QueryRun {
        query_analysis,
        outcomes: indexed.into_iter().map(|(_, o)| o).collect(),
    })
}
