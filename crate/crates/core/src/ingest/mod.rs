//! Readers and writers for corpora, queries, relevance judgments and TREC runs.
//!
//! Corpora and queries use the JSON Lines layout of the BEIR distribution
//! (`_id`, `title`, `text`), qrels are whitespace separated
//! `query_id doc_id grade` rows, and runs are the six-column TREC format.

mod corpus;
mod qrels;
mod run;

pub use corpus::{parse_corpus, parse_queries, read_corpus, read_queries, Corpus, Document, Query};
pub use qrels::{parse_qrels, read_qrels, QrelSet};
pub use run::{
    format_run, parse_run, read_run, write_run, RunEntry, RunStrictness, RunWarning,
};

use std::path::PathBuf;

/// Longest accepted corpus or query line, in bytes.
pub const MAX_LINE_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateKey { line: usize, id: String },
    #[error("line {line}: exceeds the {MAX_LINE_BYTES}-byte line limit")]
    LineTooLong { line: usize },
    #[error("line {line}: invalid grade `{value}`")]
    InvalidGrade { line: usize, value: String },
    #[error("line {line}: negative grade {value}")]
    NegativeGrade { line: usize, value: i64 },
    #[error("line {line}: duplicate judgment for ({query_id}, {doc_id})")]
    DuplicatePair {
        line: usize,
        query_id: String,
        doc_id: String,
    },
    #[error("run group ({query_id}, {tag}): {message}")]
    RunGroup {
        query_id: String,
        tag: String,
        message: String,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IngestError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        IngestError::Parse {
            line,
            message: message.into(),
        }
    }
}

pub(crate) fn open(path: &std::path::Path) -> Result<std::io::BufReader<std::fs::File>, IngestError> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|source| IngestError::File {
            path: path.to_path_buf(),
            source,
        })
}

/// Iterate over the lines of `reader` with 1-based line numbers, enforcing
/// [`MAX_LINE_BYTES`]. Trailing `\r\n` / `\n` are stripped.
pub(crate) fn numbered_lines<R: std::io::BufRead>(
    mut reader: R,
) -> impl Iterator<Item = Result<(usize, String), IngestError>> {
    let mut line_no = 0usize;
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        line_no += 1;
        let mut buf = Vec::new();
        // Read at most one byte past the limit so oversized lines are detected
        // without buffering them entirely.
        let mut limited = std::io::Read::take(&mut reader, (MAX_LINE_BYTES + 2) as u64);
        match std::io::BufRead::read_until(&mut limited, b'\n', &mut buf) {
            Ok(0) => {
                done = true;
                None
            }
            Ok(_) => {
                if buf.last() == Some(&b'\n') {
                    buf.pop();
                    if buf.last() == Some(&b'\r') {
                        buf.pop();
                    }
                } else if buf.len() > MAX_LINE_BYTES {
                    done = true;
                    return Some(Err(IngestError::LineTooLong { line: line_no }));
                }
                if buf.len() > MAX_LINE_BYTES {
                    done = true;
                    return Some(Err(IngestError::LineTooLong { line: line_no }));
                }
                match String::from_utf8(buf) {
                    Ok(s) => Some(Ok((line_no, s))),
                    Err(_) => {
                        done = true;
                        Some(Err(IngestError::parse(line_no, "invalid UTF-8")))
                    }
                }
            }
            Err(e) => {
                done = true;
                Some(Err(e.into()))
            }
        }
    })
}
