use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{idf, term_weight, tokenize, Bm25Error, Bm25Params};
use crate::exec::Execution;
use crate::ingest::{Document, Query, RunEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index over a fixed corpus.
///
/// Documents are stored in ascending `doc_id` order, so the internal
/// ordinals, the postings order and the persisted bytes do not depend on
/// corpus insertion order.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub(crate) params: Bm25Params,
    pub(crate) doc_ids: Vec<String>,
    pub(crate) doc_lens: Vec<u32>,
    pub(crate) postings: HashMap<String, Vec<Posting>>,
    pub(crate) avg_doc_len: f64,
    pub(crate) ordinal: HashMap<String, u32>,
}

/// One first-stage result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    /// 1-based first-stage rank.
    pub first_stage_rank: u32,
    pub bm25_score: f64,
}

/// The ordered top-k first-stage results for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub k: usize,
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_run_entries(&self, tag: &str) -> Vec<RunEntry> {
        self.entries
            .iter()
            .map(|c| RunEntry {
                query_id: self.query_id.clone(),
                doc_id: c.doc_id.clone(),
                rank: c.first_stage_rank,
                score: c.bm25_score,
                tag: tag.to_string(),
            })
            .collect()
    }

    /// Rebuild candidate lists from run rows (one list per query, cut at `k`).
    /// Rows are ordered by rank; ranks are renumbered 1..n after the cut.
    pub fn from_run_entries(entries: &[RunEntry], k: usize) -> BTreeMap<String, CandidateList> {
        let mut grouped: BTreeMap<String, Vec<&RunEntry>> = BTreeMap::new();
        for e in entries {
            grouped.entry(e.query_id.clone()).or_default().push(e);
        }
        grouped
            .into_iter()
            .map(|(query_id, mut rows)| {
                rows.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.doc_id.cmp(&b.doc_id)));
                rows.truncate(k);
                let entries = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| Candidate {
                        doc_id: r.doc_id.clone(),
                        first_stage_rank: i as u32 + 1,
                        bm25_score: r.score,
                    })
                    .collect();
                (query_id.clone(), CandidateList { query_id, k, entries })
            })
            .collect()
    }
}

impl Bm25Index {
    pub fn build(docs: &[Document], params: Bm25Params) -> Result<Self, Bm25Error> {
        Self::build_with(docs, params, Execution::default())
    }

    /// Build the index, tokenizing documents with the given strategy.
    pub fn build_with(
        docs: &[Document],
        params: Bm25Params,
        exec: Execution,
    ) -> Result<Self, Bm25Error> {
        params.validate()?;
        let mut order: Vec<&Document> = docs.iter().collect();
        order.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = order.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(Bm25Error::DuplicateDocument(w[0].doc_id.clone()));
        }

        let counted: Vec<(u32, BTreeMap<String, u32>)> = exec.map(&order, |d| {
            let tokens = tokenize(&d.full_text());
            let mut tf = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_insert(0u32) += 1;
            }
            (tokens.len() as u32, tf)
        });

        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(order.len());
        for (ordinal, (len, tf)) in counted.into_iter().enumerate() {
            doc_lens.push(len);
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf: count,
                });
            }
        }
        let doc_ids = order.iter().map(|d| d.doc_id.clone()).collect();
        Ok(Self::from_parts(params, doc_ids, doc_lens, postings))
    }

    pub(crate) fn from_parts(
        params: Bm25Params,
        doc_ids: Vec<String>,
        doc_lens: Vec<u32>,
        postings: HashMap<String, Vec<Posting>>,
    ) -> Self {
        let avg_doc_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lens.len() as f64
        };
        let ordinal = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Bm25Index {
            params,
            doc_ids,
            doc_lens,
            postings,
            avg_doc_len,
            ordinal,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Same index data, scored with different parameters.
    pub fn with_params(mut self, params: Bm25Params) -> Result<Self, Bm25Error> {
        params.validate()?;
        self.params = params;
        Ok(self)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.ordinal.get(doc_id).map(|&o| self.doc_lens[o as usize])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    /// BM25 score of one document for already-tokenized query terms.
    pub fn score(&self, query_terms: &[String], doc_id: &str) -> Result<f64, Bm25Error> {
        let &ord = self
            .ordinal
            .get(doc_id)
            .ok_or_else(|| Bm25Error::UnknownDocument(doc_id.to_string()))?;
        let mut total = 0.0;
        for term in query_terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Ok(pos) = list.binary_search_by_key(&ord, |p| p.doc) {
                let tf = list[pos].tf;
                total += idf(self.doc_count(), list.len())
                    * term_weight(&self.params, tf, self.doc_lens[ord as usize], self.avg_doc_len);
            }
        }
        Ok(total)
    }

    /// Top-`k` documents with a positive score, best first; ties go to the
    /// lexicographically smaller `doc_id`.
    pub fn retrieve_topk(&self, query_id: &str, text: &str, k: usize) -> Result<CandidateList, Bm25Error> {
        if k == 0 {
            return Err(Bm25Error::InvalidCutoff);
        }
        if self.doc_ids.is_empty() {
            return Err(Bm25Error::EmptyIndex);
        }
        let terms = tokenize(text);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let w_idf = idf(self.doc_count(), list.len());
            for p in list {
                *acc.entry(p.doc).or_insert(0.0) += w_idf
                    * term_weight(&self.params, p.tf, self.doc_lens[p.doc as usize], self.avg_doc_len);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        // Ordinals follow doc_id order, so comparing ordinals is the doc_id tie-break.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (ord, score))| Candidate {
                doc_id: self.doc_ids[ord as usize].clone(),
                first_stage_rank: i as u32 + 1,
                bm25_score: score,
            })
            .collect();
        Ok(CandidateList {
            query_id: query_id.to_string(),
            k,
            entries,
        })
    }

    /// Retrieve for many queries, each using [`Query::retrieval_text`].
    pub fn retrieve_batch(
        &self,
        queries: &[Query],
        k: usize,
        exec: Execution,
    ) -> Result<Vec<CandidateList>, Bm25Error> {
        exec.map(queries, |q| self.retrieve_topk(&q.query_id, q.retrieval_text(), k))
            .into_iter()
            .collect()
    }
}
