//! Turning judgments into final rankings.
//!
//! Three modes are supported: `discrete` (accepted documents first, each
//! partition kept in first-stage order), `continuous` (normalized yes
//! probability) and `hybrid` (`alpha * S_prob + S_BM25`). Ensembles average
//! `S_prob` across judge models before the hybrid sum.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bm25::CandidateList;
use crate::ingest::RunEntry;

pub const DEFAULT_ALPHA: f64 = 100.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoringError {
    #[error("query `{query_id}`: {expected} candidates but {got} scores")]
    LengthMismatch {
        query_id: String,
        expected: usize,
        got: usize,
    },
    #[error("ensemble needs at least one model score")]
    EmptyEnsemble,
    #[error("alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("unknown scoring mode `{0}` (expected discrete, continuous or hybrid)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    /// `Yes` when `p_yes >= p_no`; ties go to `Yes`.
    pub fn from_probs(p_yes: f64, p_no: f64) -> Verdict {
        if p_yes >= p_no {
            Verdict::Yes
        } else {
            Verdict::No
        }
    }
}

/// `p_yes / (p_yes + p_no)`.
///
/// # Panics
/// If either input is not strictly positive. Judgments floor both
/// probabilities, so this only fires on hand-built inputs.
pub fn normalize_prob(p_yes: f64, p_no: f64) -> f64 {
    assert!(
        p_yes > 0.0 && p_no > 0.0,
        "normalize_prob needs positive probabilities, got ({p_yes}, {p_no})"
    );
    // The sum is kept as an exact (s, err) pair and the quotient refined with
    // one fused residual step, so the result is the quotient of the stored
    // inputs rounded once rather than twice.
    let s = p_yes + p_no;
    let bb = s - p_yes;
    let err = (p_yes - (s - bb)) + (p_no - bb);
    let q = p_yes / s;
    let residual = q.mul_add(-s, p_yes) - q * err;
    q + residual / s
}

pub fn hybrid_score(prob_score: f64, bm25_score: f64, alpha: f64) -> f64 {
    alpha * prob_score + bm25_score
}

/// `alpha * mean(prob_scores) + bm25_score`.
pub fn ensemble_score(prob_scores: &[f64], bm25_score: f64, alpha: f64) -> Result<f64, ScoringError> {
    if prob_scores.is_empty() {
        return Err(ScoringError::EmptyEnsemble);
    }
    Ok(hybrid_score(running_mean(prob_scores.iter().copied()), bm25_score, alpha))
}

// Identical members give back exactly that value, which sum/len does not, so
// an ensemble of one model's copies ranks the same as that model's hybrid.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Discrete,
    Continuous,
    Hybrid,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 3] = [ScoringMode::Discrete, ScoringMode::Continuous, ScoringMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            ScoringMode::Discrete => "discrete",
            ScoringMode::Continuous => "continuous",
            ScoringMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoringMode {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoringMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ScoringError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub mode: ScoringMode,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl ScoringConfig {
    pub fn new(mode: ScoringMode) -> Self {
        ScoringConfig {
            mode,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        check_alpha(self.alpha)
    }

    /// Run tag for one judge model, e.g. `judgerank-llama-hybrid-a100`.
    pub fn tag(&self, member: &str) -> String {
        match self.mode {
            ScoringMode::Hybrid => format!("judgerank-{member}-hybrid-a{}", self.alpha),
            mode => format!("judgerank-{member}-{mode}"),
        }
    }
}

/// Run tag for an ensemble, e.g. `judgerank-ensemble-a100`.
pub fn ensemble_tag(alpha: f64) -> String {
    format!("judgerank-ensemble-a{alpha}")
}

fn check_alpha(alpha: f64) -> Result<(), ScoringError> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(ScoringError::InvalidAlpha(alpha))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub doc_id: String,
    pub first_stage_rank: u32,
    pub bm25_score: f64,
    /// Normalized yes probability (mean across models for ensembles).
    pub prob_score: Option<f64>,
    pub verdict: Option<Verdict>,
    pub final_score: f64,
    pub final_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub query_id: String,
    pub mode: ScoringMode,
    pub tag: String,
    /// Ordered by `final_rank`.
    pub candidates: Vec<ScoredCandidate>,
}

impl RankedRun {
    pub fn doc_ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.doc_id.as_str()).collect()
    }

    pub fn to_run_entries(&self) -> Vec<RunEntry> {
        self.candidates
            .iter()
            .map(|c| RunEntry {
                query_id: self.query_id.clone(),
                doc_id: c.doc_id.clone(),
                rank: c.final_rank,
                score: c.final_score,
                tag: self.tag.clone(),
            })
            .collect()
    }
}

fn check_len(list: &CandidateList, got: usize) -> Result<(), ScoringError> {
    if list.entries.len() == got {
        Ok(())
    } else {
        Err(ScoringError::LengthMismatch {
            query_id: list.query_id.clone(),
            expected: list.entries.len(),
            got,
        })
    }
}

fn finish(list: &CandidateList, mode: ScoringMode, tag: &str, mut scored: Vec<ScoredCandidate>) -> RankedRun {
    for (i, c) in scored.iter_mut().enumerate() {
        c.final_rank = i as u32 + 1;
    }
    RankedRun {
        query_id: list.query_id.clone(),
        mode,
        tag: tag.to_string(),
        candidates: scored,
    }
}

/// Accepted documents first, rejected after; first-stage order inside each.
///
/// `final_score` is `[Yes] + 1 / (1 + R0)`, strictly decreasing down the
/// ranking so the emitted run file stays score-ordered.
pub fn rank_discrete(list: &CandidateList, verdicts: &[Verdict], tag: &str) -> Result<RankedRun, ScoringError> {
    check_len(list, verdicts.len())?;
    let mut scored: Vec<ScoredCandidate> = list
        .entries
        .iter()
        .zip(verdicts)
        .map(|(c, v)| {
            let accepted = if *v == Verdict::Yes { 1.0 } else { 0.0 };
            ScoredCandidate {
                doc_id: c.doc_id.clone(),
                first_stage_rank: c.first_stage_rank,
                bm25_score: c.bm25_score,
                prob_score: None,
                verdict: Some(*v),
                final_score: accepted + 1.0 / (1.0 + c.first_stage_rank as f64),
                final_rank: 0,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        (a.verdict != Some(Verdict::Yes))
            .cmp(&(b.verdict != Some(Verdict::Yes)))
            .then(a.first_stage_rank.cmp(&b.first_stage_rank))
    });
    Ok(finish(list, ScoringMode::Discrete, tag, scored))
}

/// Score descending, then first-stage rank ascending, then doc id ascending.
fn by_final_score(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then(a.first_stage_rank.cmp(&b.first_stage_rank))
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

fn rank_by(
    list: &CandidateList,
    mode: ScoringMode,
    tag: &str,
    prob_scores: &[f64],
    score: impl Fn(f64, f64) -> f64,
) -> Result<RankedRun, ScoringError> {
    check_len(list, prob_scores.len())?;
    let mut scored = Vec::with_capacity(prob_scores.len());
    for (c, &p) in list.entries.iter().zip(prob_scores) {
        let final_score = score(p, c.bm25_score);
        if !final_score.is_finite() {
            return Err(ScoringError::NonFinite(final_score));
        }
        scored.push(ScoredCandidate {
            doc_id: c.doc_id.clone(),
            first_stage_rank: c.first_stage_rank,
            bm25_score: c.bm25_score,
            prob_score: Some(p),
            verdict: None,
            final_score,
            final_rank: 0,
        });
    }
    scored.sort_by(by_final_score);
    Ok(finish(list, mode, tag, scored))
}

pub fn rank_continuous(list: &CandidateList, prob_scores: &[f64], tag: &str) -> Result<RankedRun, ScoringError> {
    rank_by(list, ScoringMode::Continuous, tag, prob_scores, |p, _| p)
}

pub fn rank_hybrid(list: &CandidateList, prob_scores: &[f64], alpha: f64, tag: &str) -> Result<RankedRun, ScoringError> {
    check_alpha(alpha)?;
    rank_by(list, ScoringMode::Hybrid, tag, prob_scores, |p, bm25| hybrid_score(p, bm25, alpha))
}

/// Hybrid ranking on the mean `S_prob` across models.
///
/// `per_model[m][i]` is model `m`'s score for candidate `i`.
pub fn rank_ensemble(list: &CandidateList, per_model: &[Vec<f64>], alpha: f64, tag: &str) -> Result<RankedRun, ScoringError> {
    check_alpha(alpha)?;
    if per_model.is_empty() {
        return Err(ScoringError::EmptyEnsemble);
    }
    for scores in per_model {
        check_len(list, scores.len())?;
    }
    let means: Vec<f64> = (0..list.entries.len())
        .map(|i| running_mean(per_model.iter().map(|m| m[i])))
        .collect();
    rank_by(list, ScoringMode::Hybrid, tag, &means, |p, bm25| hybrid_score(p, bm25, alpha))
}
