//! Zero-shot LLM judgment reranking on top of BM25 first-stage retrieval.
//!
//! The crate covers the whole batch workflow: ingesting BEIR-style corpora,
//! building and querying a BM25 index, running the query-analysis /
//! document-analysis / judgment pipeline against a chat-completion backend,
//! turning judgments into rankings, and scoring runs with nDCG@k.

pub mod backend;
pub mod bm25;
pub mod exec;
pub mod ingest;
pub mod pipeline;
pub mod eval;
pub mod scoring;
pub mod config;
pub mod workflow;
