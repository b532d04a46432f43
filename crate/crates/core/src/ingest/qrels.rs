use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use super::{numbered_lines, open, IngestError};

/// Graded relevance judgments: `query_id -> doc_id -> grade`.
///
/// Grade-0 rows are kept (they mark judged non-relevant documents). Pairs
/// without a row read as grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the pair was already present (the grade is not replaced).
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> bool {
        let per_query = self.judgments.entry(query_id.to_string()).or_default();
        if per_query.contains_key(doc_id) {
            return false;
        }
        per_query.insert(doc_id.to_string(), grade);
        true
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn is_header(fields: &[&str]) -> bool {
    fields.len() >= 3
        && fields[0].eq_ignore_ascii_case("query-id")
        && fields[1].eq_ignore_ascii_case("corpus-id")
        && fields[2].eq_ignore_ascii_case("score")
}

/// Parse qrels rows `query_id doc_id grade` (tab or space separated).
///
/// Four-column TREC rows (`query_id iteration doc_id grade`) are accepted as
/// well. A leading `query-id corpus-id score` header is skipped.
pub fn parse_qrels<R: BufRead>(reader: R) -> Result<QrelSet, IngestError> {
    let mut set = QrelSet::new();
    let mut first_row = true;
    for item in numbered_lines(reader) {
        let (line, content) = item?;
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if first_row {
            first_row = false;
            if is_header(&fields) {
                continue;
            }
        }
        let (query_id, doc_id, grade) = match fields.as_slice() {
            [q, d, g] => (*q, *d, *g),
            [q, _, d, g] => (*q, *d, *g),
            _ => {
                return Err(IngestError::parse(
                    line,
                    format!("expected 3 or 4 columns, found {}", fields.len()),
                ))
            }
        };
        let value: i64 = grade.parse().map_err(|_| IngestError::InvalidGrade {
            line,
            value: grade.to_string(),
        })?;
        if value < 0 {
            return Err(IngestError::NegativeGrade { line, value });
        }
        let value = u32::try_from(value).map_err(|_| IngestError::InvalidGrade {
            line,
            value: grade.to_string(),
        })?;
        if !set.insert(query_id, doc_id, value) {
            return Err(IngestError::DuplicatePair {
                line,
                query_id: query_id.to_string(),
                doc_id: doc_id.to_string(),
            });
        }
    }
    Ok(set)
}

pub fn read_qrels(path: &Path) -> Result<QrelSet, IngestError> {
    parse_qrels(open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row() {
        let q = parse_qrels("q1\td1\t1\n".as_bytes()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 1);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn header_is_skipped_and_zero_grades_kept() {
        let q = parse_qrels("query-id\tcorpus-id\tscore\nq1\td1\t0\nq1\td2\t2\n".as_bytes()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.for_query("q1").unwrap()["d1"], 0);
        assert_eq!(q.grade("q1", "d2"), 2);
    }

    #[test]
    fn absent_pairs_read_as_zero() {
        let q = parse_qrels("q1 d1 1".as_bytes()).unwrap();
        assert_eq!(q.grade("q1", "zz"), 0);
        assert_eq!(q.grade("q9", "d1"), 0);
    }

    #[test]
    fn duplicate_pair_is_an_error() {
        let err = parse_qrels("q1 d1 1\nq1 d1 2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::DuplicatePair { line: 2, .. }), "{err}");
    }

    #[test]
    fn negative_grade_is_an_error() {
        let err = parse_qrels("q1 d1 -1".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::NegativeGrade { value: -1, .. }));
    }

    #[test]
    fn non_integer_grade_is_an_error() {
        let err = parse_qrels("q1 d1 0.5".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::InvalidGrade { .. }));
    }

    #[test]
    fn trec_four_column_rows() {
        let q = parse_qrels("q1 0 d1 3\n".as_bytes()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 3);
    }
}
