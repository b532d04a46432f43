use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numbered_lines, open, IngestError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    /// Text shown to rerankers: title and body separated by a newline, or the
    /// body alone when the title is empty.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    /// Precomputed expansion of the query (for example an LLM reasoning chain).
    pub augmented_text: Option<String>,
}

impl Query {
    /// Text used for first-stage retrieval: the augmented text when present.
    pub fn retrieval_text(&self) -> &str {
        self.augmented_text.as_deref().unwrap_or(&self.text)
    }
}

/// Accepts both string and numeric `_id` values; some BEIR exports use bare integers.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Str(String),
    Num(serde_json::Number),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Str(s) => s,
            RawId::Num(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawDocument {
    #[serde(rename = "_id")]
    id: Option<RawId>,
    #[serde(default)]
    title: Option<String>,
    text: Option<String>,
}

#[derive(Deserialize)]
struct RawQuery {
    #[serde(rename = "_id")]
    id: Option<RawId>,
    text: Option<String>,
    #[serde(default)]
    augmented_text: Option<String>,
}

fn required_id(id: Option<RawId>, line: usize) -> Result<String, IngestError> {
    match id.map(RawId::into_string) {
        Some(id) if !id.is_empty() => Ok(id),
        Some(_) => Err(IngestError::parse(line, "empty `_id`")),
        None => Err(IngestError::parse(line, "missing `_id`")),
    }
}

/// Parse a JSON Lines corpus. Blank lines are skipped; line numbers in errors
/// refer to physical lines.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>, IngestError> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for item in numbered_lines(reader) {
        let (line, content) = item?;
        if content.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&content)
            .map_err(|e| IngestError::parse(line, e.to_string()))?;
        let doc_id = required_id(raw.id, line)?;
        let text = raw
            .text
            .ok_or_else(|| IngestError::parse(line, "missing `text`"))?;
        if !seen.insert(doc_id.clone()) {
            return Err(IngestError::DuplicateKey { line, id: doc_id });
        }
        docs.push(Document {
            doc_id,
            title: raw.title.unwrap_or_default(),
            text,
        });
    }
    Ok(docs)
}

pub fn parse_queries<R: BufRead>(reader: R) -> Result<Vec<Query>, IngestError> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for item in numbered_lines(reader) {
        let (line, content) = item?;
        if content.trim().is_empty() {
            continue;
        }
        let raw: RawQuery = serde_json::from_str(&content)
            .map_err(|e| IngestError::parse(line, e.to_string()))?;
        let query_id = required_id(raw.id, line)?;
        let text = raw
            .text
            .ok_or_else(|| IngestError::parse(line, "missing `text`"))?;
        if !seen.insert(query_id.clone()) {
            return Err(IngestError::DuplicateKey { line, id: query_id });
        }
        queries.push(Query {
            query_id,
            text,
            augmented_text: raw.augmented_text,
        });
    }
    Ok(queries)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>, IngestError> {
    parse_corpus(open(path)?)
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>, IngestError> {
    parse_queries(open(path)?)
}

/// A parsed corpus with lookup by document id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Fails on duplicate ids (line number is the 1-based position in `docs`).
    pub fn new(docs: Vec<Document>) -> Result<Self, IngestError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(IngestError::DuplicateKey {
                    line: i + 1,
                    id: d.doc_id.clone(),
                });
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}
