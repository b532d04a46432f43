use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numbered_lines, open, IngestError};

/// One row of a TREC run file: `query_id Q0 doc_id rank score tag`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// What to do when a `(query_id, tag)` group has rank gaps or scores that
/// increase with rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RunStrictness {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunWarning {
    RankGap { query_id: String, tag: String },
    ScoreOrder { query_id: String, tag: String, rank: u32 },
}

impl std::fmt::Display for RunWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunWarning::RankGap { query_id, tag } => {
                write!(f, "({query_id}, {tag}): ranks are not 1..n")
            }
            RunWarning::ScoreOrder { query_id, tag, rank } => {
                write!(f, "({query_id}, {tag}): score increases at rank {rank}")
            }
        }
    }
}

/// Parse a run. Duplicate documents within a group are always an error; rank
/// gaps and score-order violations are warnings unless `strictness` is strict.
pub fn parse_run<R: BufRead>(
    reader: R,
    strictness: RunStrictness,
) -> Result<(Vec<RunEntry>, Vec<RunWarning>), IngestError> {
    let mut entries = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    let mut seen_docs: HashSet<(String, String, String)> = HashSet::new();

    for item in numbered_lines(reader) {
        let (line, content) = item?;
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [query_id, _q0, doc_id, rank, score, tag] = fields.as_slice() else {
            return Err(IngestError::parse(
                line,
                format!("expected 6 columns, found {}", fields.len()),
            ));
        };
        let rank: u32 = rank
            .parse()
            .ok()
            .filter(|&r| r >= 1)
            .ok_or_else(|| IngestError::parse(line, format!("invalid rank `{rank}`")))?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| IngestError::parse(line, format!("invalid score `{score}`")))?;
        if !seen_docs.insert((query_id.to_string(), tag.to_string(), doc_id.to_string())) {
            return Err(IngestError::parse(
                line,
                format!("document `{doc_id}` repeated for query `{query_id}`"),
            ));
        }
        groups
            .entry((query_id.to_string(), tag.to_string()))
            .or_default()
            .push(entries.len());
        entries.push(RunEntry {
            query_id: query_id.to_string(),
            doc_id: doc_id.to_string(),
            rank,
            score,
            tag: tag.to_string(),
        });
    }

    let mut warnings = Vec::new();
    for ((query_id, tag), mut idx) in groups {
        idx.sort_by_key(|&i| entries[i].rank);
        let contiguous = idx
            .iter()
            .enumerate()
            .all(|(pos, &i)| entries[i].rank as usize == pos + 1);
        if !contiguous {
            warnings.push(RunWarning::RankGap {
                query_id: query_id.clone(),
                tag: tag.clone(),
            });
        }
        if let Some(w) = idx.windows(2).find(|w| entries[w[1]].score > entries[w[0]].score) {
            warnings.push(RunWarning::ScoreOrder {
                query_id,
                tag,
                rank: entries[w[1]].rank,
            });
        }
    }

    if strictness == RunStrictness::Strict {
        if let Some(w) = warnings.first() {
            let (query_id, tag) = match w {
                RunWarning::RankGap { query_id, tag } | RunWarning::ScoreOrder { query_id, tag, .. } => {
                    (query_id.clone(), tag.clone())
                }
            };
            return Err(IngestError::RunGroup {
                query_id,
                tag,
                message: w.to_string(),
            });
        }
    }
    Ok((entries, warnings))
}

pub fn read_run(
    path: &Path,
    strictness: RunStrictness,
) -> Result<(Vec<RunEntry>, Vec<RunWarning>), IngestError> {
    parse_run(open(path)?, strictness)
}

fn check_field(value: &str, what: &str) -> Result<(), IngestError> {
    if value.is_empty() || value.chars().any(char::is_whitespace) {
        return Err(IngestError::parse(
            0,
            format!("{what} `{value}` cannot be written to a run file"),
        ));
    }
    Ok(())
}

/// Render entries in file order with scores fixed to six decimals.
pub fn format_run(entries: &[RunEntry]) -> Result<String, IngestError> {
    let mut out = String::new();
    for e in entries {
        check_field(&e.query_id, "query id")?;
        check_field(&e.doc_id, "document id")?;
        check_field(&e.tag, "tag")?;
        if !e.score.is_finite() {
            return Err(IngestError::parse(0, format!("non-finite score for `{}`", e.doc_id)));
        }
        writeln!(
            out,
            "{} Q0 {} {} {:.6} {}",
            e.query_id, e.doc_id, e.rank, e.score, e.tag
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn write_run<W: Write>(mut writer: W, entries: &[RunEntry]) -> Result<(), IngestError> {
    writer.write_all(format_run(entries)?.as_bytes())?;
    Ok(())
}
