use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};

use super::{PipelineError, QueryAnalysis};

/// Source of `created_at` timestamps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    /// Always report this RFC 3339 timestamp (reproducible runs).
    Fixed(String),
}

impl Clock {
    /// `Fixed` from `SOURCE_DATE_EPOCH` when it is set to a valid epoch, else `System`.
    pub fn from_env() -> Self {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse::<i64>().ok())
            .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
            .map(|t| Clock::Fixed(t.to_rfc3339_opts(SecondsFormat::Secs, true)))
            .unwrap_or(Clock::System)
    }

    pub fn now(&self) -> String {
        match self {
            Clock::System => Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            Clock::Fixed(s) => s.clone(),
        }
    }
}

/// Query analyses keyed by query id, optionally backed by a JSON file that is
/// rewritten atomically on every insert.
#[derive(Debug)]
pub struct QueryAnalysisCache {
    path: Option<PathBuf>,
    clock: Clock,
    entries: Mutex<BTreeMap<String, QueryAnalysis>>,
}

impl QueryAnalysisCache {
    pub fn in_memory() -> Self {
        QueryAnalysisCache {
            path: None,
            clock: Clock::System,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    /// Open a file-backed cache; a missing file starts empty.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let path = path.into();
        let entries = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| PipelineError::Cache(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(PipelineError::Cache(format!("{}: {e}", path.display()))),
        };
        Ok(QueryAnalysisCache {
            path: Some(path),
            clock: Clock::System,
            entries: Mutex::new(entries),
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, query_id: &str) -> Option<QueryAnalysis> {
        self.entries.lock().expect("cache lock").get(query_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Store an analysis and, when file-backed, persist the whole cache before
    /// returning. A failed write leaves the previous file intact.
    pub fn insert(&self, analysis: QueryAnalysis) -> Result<(), PipelineError> {
        let mut entries = self.entries.lock().expect("cache lock");
        let mut next = entries.clone();
        next.insert(analysis.query_id.clone(), analysis);
        if let Some(path) = &self.path {
            persist(path, &next)?;
        }
        *entries = next;
        Ok(())
    }
}

fn persist(path: &Path, entries: &BTreeMap<String, QueryAnalysis>) -> Result<(), PipelineError> {
    let fail = |e: &dyn std::fmt::Display| PipelineError::Cache(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut json = serde_json::to_string_pretty(entries).map_err(|e| fail(&e))?;
    json.push('\n');
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(json.as_bytes()).map_err(|e| fail(&e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}
