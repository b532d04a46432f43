//! The three-step judgment pipeline: query analysis, document analysis and a
//! one-word relevance judgment whose first-token probabilities become scores.

mod cache;
mod steps;
mod template;

pub use cache::{Clock, QueryAnalysisCache};
pub use steps::{
    analyze_document, analyze_query, judge, run_pipeline, AnalyzedDocument, DocFailure, DocOutcome,
    PipelineSettings, QueryRun, QueryTextPolicy, StepBackends, Variant,
};
pub use template::{
    PromptInputs, PromptTemplate, RenderedPrompt, Step, TemplateNames, DEFAULT_TEMPLATE,
};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, TokenAlternative};

/// Probability assigned to a verdict token missing from the alternatives.
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("query `{0}` has empty text")]
    EmptyQuery(String),
    #[error("document `{0}` has empty text")]
    EmptyDocument(String),
    #[error("document `{0}` is not in the corpus")]
    UnknownDocument(String),
    #[error("{step} prompt needs `{input}`")]
    MissingInput { step: Step, input: &'static str },
    #[error("template: {0}")]
    Template(String),
    #[error("no candidates to rerank for query `{0}`")]
    NoCandidates(String),
    #[error("query analysis for `{0}` came back empty")]
    EmptyAnalysis(String),
    #[error("{step} backend call failed: {source}")]
    Backend {
        step: Step,
        #[source]
        source: BackendError,
    },
    #[error("query-analysis cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnalysis {
    pub query_id: String,
    pub analysis_text: String,
    pub model: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentAnalysis {
    pub query_id: String,
    pub doc_id: String,
    pub extractive_summary: String,
    pub relevance_discussion: String,
}

impl DocumentAnalysis {
    /// Split a `SUMMARY: ... DISCUSSION: ...` reply. Without both labels the
    /// whole reply becomes the discussion and the summary stays empty.
    pub fn from_reply(query_id: &str, doc_id: &str, reply: &str) -> Self {
        let (summary, discussion) = split_labeled(reply)
            .unwrap_or_else(|| (String::new(), reply.to_string()));
        DocumentAnalysis {
            query_id: query_id.to_string(),
            doc_id: doc_id.to_string(),
            extractive_summary: summary,
            relevance_discussion: discussion,
        }
    }

    /// Text handed to the judgment step.
    pub fn prompt_text(&self) -> String {
        if self.extractive_summary.is_empty() {
            self.relevance_discussion.clone()
        } else {
            format!(
                "SUMMARY: {}\nDISCUSSION: {}",
                self.extractive_summary, self.relevance_discussion
            )
        }
    }
}

fn split_labeled(reply: &str) -> Option<(String, String)> {
    const SUMMARY: &str = "summary:";
    const DISCUSSION: &str = "discussion:";
    // ASCII lowercasing keeps byte offsets aligned with `reply`.
    let lower = reply.to_ascii_lowercase();
    let s = lower.find(SUMMARY)?;
    let d = s + lower[s..].find(DISCUSSION)?;
    let summary = reply[s + SUMMARY.len()..d].trim().to_string();
    let discussion = reply[d + DISCUSSION.len()..].trim().to_string();
    Some((summary, discussion))
}

/// One (query, document) judgment with the analyses that led to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub query_id: String,
    pub doc_id: String,
    pub p_yes: f64,
    pub p_no: f64,
    pub verdict_text: String,
    pub model: String,
    pub template_hash: String,
    #[serde(default)]
    pub query_analysis: Option<String>,
    #[serde(default)]
    pub doc_summary: Option<String>,
    #[serde(default)]
    pub doc_discussion: Option<String>,
    /// The document was cut to the truncation budget before judging.
    #[serde(default)]
    pub truncated: bool,
}

/// Sum the probability mass of "yes" and "no" variants (case and surrounding
/// whitespace ignored) among first-token alternatives. Each side is clamped
/// to `[PROB_FLOOR, 1]`.
pub fn extract_yes_no_probs(alternatives: &[TokenAlternative]) -> (f64, f64) {
    let mut yes = 0.0;
    let mut no = 0.0;
    for alt in alternatives {
        let token = alt.token.trim().to_lowercase();
        if token == "yes" {
            yes += alt.logprob.exp();
        } else if token == "no" {
            no += alt.logprob.exp();
        }
    }
    (yes.clamp(PROB_FLOOR, 1.0), no.clamp(PROB_FLOOR, 1.0))
}
