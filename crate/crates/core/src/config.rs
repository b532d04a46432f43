//! Run manifest: one TOML file describing a reranking experiment.
//!
//! String values may reference environment variables as `${NAME}`; an unset
//! variable is an error. Relative paths resolve against the manifest's
//! directory and must exist when the manifest is loaded (the output directory
//! and cache files are created on demand).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, BackendError, ChatBackend, OpenAiBackend, ScriptedBackend};
use crate::bm25::Bm25Params;
use crate::eval::EvalOptions;
use crate::pipeline::{PipelineSettings, PromptTemplate, TemplateNames, Variant};
use crate::scoring::{ScoringMode, DEFAULT_ALPHA};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("environment variable `{0}` referenced in the config is not set")]
    MissingVar(String),
    #[error("{0}")]
    Invalid(String),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    #[serde(default)]
    pub qrels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Section {
    pub k1: f64,
    pub b: f64,
    /// First-stage cutoff: how many candidates are reranked per query.
    pub k: usize,
}

impl Default for Bm25Section {
    fn default() -> Self {
        let p = Bm25Params::default();
        Bm25Section { k1: p.k1, b: p.b, k: 100 }
    }
}

impl Bm25Section {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateSection {
    /// Prompt file; the built-in prompts are used when absent.
    pub path: Option<PathBuf>,
    pub query_name: String,
    pub doc_name: String,
    pub relation: String,
}

impl Default for TemplateSection {
    fn default() -> Self {
        let n = TemplateNames::default();
        TemplateSection {
            path: None,
            query_name: n.query_name,
            doc_name: n.doc_name,
            relation: n.relation,
        }
    }
}

impl TemplateSection {
    pub fn names(&self) -> TemplateNames {
        TemplateNames {
            query_name: self.query_name.clone(),
            doc_name: self.doc_name.clone(),
            relation: self.relation.clone(),
        }
    }

    pub fn load(&self) -> Result<PromptTemplate, ConfigError> {
        match &self.path {
            Some(p) => PromptTemplate::from_file(p, self.names()).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(PromptTemplate::default_with(self.names())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub modes: Vec<ScoringMode>,
    pub alpha: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection {
            modes: ScoringMode::ALL.to_vec(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Where a step's model lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Openai(BackendConfig),
    /// Canned replies from a JSON script file (offline runs and tests).
    Scripted { script: PathBuf },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        Ok(match self {
            BackendSpec::Openai(c) => Arc::new(OpenAiBackend::new(c.clone())?),
            BackendSpec::Scripted { script } => Arc::new(ScriptedBackend::from_file(script)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryAnalysisSection {
    pub backend: BackendSpec,
    /// Cache file; defaults to `{output_dir}/{dataset}.query-analyses.{model}.json`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

/// One judge model (ensemble member).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSpec {
    /// Short label used in file names and run tags.
    pub name: String,
    /// Backend for document analysis, and for judgment unless overridden.
    pub backend: BackendSpec,
    #[serde(default)]
    pub judgment_backend: Option<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset label used in every output file name.
    pub dataset: String,
    pub output_dir: PathBuf,
    /// Bound on concurrent queries and on concurrent documents per query.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub data: DataPaths,
    #[serde(default)]
    pub bm25: Bm25Section,
    #[serde(default)]
    pub template: TemplateSection,
    #[serde(default)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub eval: EvalOptions,
    pub query_analysis: QueryAnalysisSection,
    pub judges: Vec<JudgeSpec>,
}

fn default_concurrency() -> usize {
    8
}

fn interpolate(value: &mut toml::Value, pattern: &Regex) -> Result<(), ConfigError> {
    match value {
        toml::Value::String(s) => {
            let mut missing = None;
            let replaced = pattern.replace_all(s, |c: &regex::Captures<'_>| match std::env::var(&c[1]) {
                Ok(v) => v,
                Err(_) => {
                    missing.get_or_insert_with(|| c[1].to_string());
                    String::new()
                }
            });
            if let Some(var) = missing {
                return Err(ConfigError::MissingVar(var));
            }
            *s = replaced.into_owned();
        }
        toml::Value::Array(items) => {
            for v in items {
                interpolate(v, pattern)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, v) in t.iter_mut() {
                interpolate(v, pattern)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn is_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// File-name-safe form of a model identifier.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
            out.push(c);
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Syntax { message, .. } => ConfigError::Syntax {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Parse, interpolate, resolve paths against `base` and validate.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let syntax = |message: String| ConfigError::Syntax {
            path: PathBuf::from("<config>"),
            message,
        };
        let table: toml::Table = toml::from_str(text).map_err(|e| syntax(e.to_string()))?;
        let mut value = toml::Value::Table(table);
        let pattern = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid pattern");
        interpolate(&mut value, &pattern)?;
        let mut config: RunConfig = value.try_into().map_err(|e: toml::de::Error| syntax(e.to_string()))?;
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.corpus);
        fix(&mut self.data.queries);
        if let Some(q) = &mut self.data.qrels {
            fix(q);
        }
        if let Some(t) = &mut self.template.path {
            fix(t);
        }
        if let Some(c) = &mut self.query_analysis.cache {
            fix(c);
        }
        let mut specs: Vec<&mut BackendSpec> = vec![&mut self.query_analysis.backend];
        for j in &mut self.judges {
            specs.push(&mut j.backend);
            if let Some(b) = &mut j.judgment_backend {
                specs.push(b);
            }
        }
        for spec in specs {
            if let BackendSpec::Scripted { script } = spec {
                fix(script);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !is_label(&self.dataset) {
            return invalid(format!("dataset `{}` must be a non-empty [A-Za-z0-9._-] label", self.dataset));
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be positive".into());
        }
        self.bm25.params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.bm25.k == 0 {
            return invalid("bm25.k must be at least 1".into());
        }
        if self.data.qrels.is_some() && self.bm25.k < self.eval.k {
            return invalid(format!(
                "bm25.k = {} is below the evaluation cutoff eval.k = {}",
                self.bm25.k, self.eval.k
            ));
        }
        if self.eval.k == 0 {
            return invalid("eval.k must be at least 1".into());
        }
        if !(self.scoring.alpha.is_finite() && self.scoring.alpha >= 0.0) {
            return invalid(format!("scoring.alpha must be finite and non-negative, got {}", self.scoring.alpha));
        }
        if self.scoring.modes.is_empty() {
            return invalid("scoring.modes is empty".into());
        }
        if self.pipeline.truncate_chars == 0 {
            return invalid("pipeline.truncate_chars must be positive".into());
        }
        if !(5..=20).contains(&self.pipeline.judgment_top_logprobs) {
            return invalid("pipeline.judgment_top_logprobs must be between 5 and 20".into());
        }
        if self.judges.is_empty() {
            return invalid("at least one [[judges]] entry is required".into());
        }
        for (i, j) in self.judges.iter().enumerate() {
            if !is_label(&j.name) {
                return invalid(format!("judge name `{}` must be a non-empty [A-Za-z0-9._-] label", j.name));
            }
            if self.judges[..i].iter().any(|o| o.name == j.name) {
                return invalid(format!("judge name `{}` is used twice", j.name));
            }
        }
        let mut must_exist: Vec<(&str, &Path)> = vec![("data.corpus", &self.data.corpus), ("data.queries", &self.data.queries)];
        if let Some(q) = &self.data.qrels {
            must_exist.push(("data.qrels", q));
        }
        if let Some(t) = &self.template.path {
            must_exist.push(("template.path", t));
        }
        let judge_specs = self
            .judges
            .iter()
            .flat_map(|j| std::iter::once(&j.backend).chain(j.judgment_backend.as_ref()));
        for spec in std::iter::once(&self.query_analysis.backend).chain(judge_specs) {
            match spec {
                BackendSpec::Scripted { script } => must_exist.push(("script", script)),
                BackendSpec::Openai(c) => c.validate()?,
            }
        }
        for (what, p) in must_exist {
            if !p.is_file() {
                return invalid(format!("{what}: {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Label judgments and run tags use for a judge; the direct-judgment
    /// variant gets a `-direct` suffix so it never mixes with full runs.
    pub fn member_label(&self, judge: &JudgeSpec) -> String {
        match self.pipeline.variant {
            Variant::Analyses => judge.name.clone(),
            Variant::Direct => format!("{}-direct", judge.name),
        }
    }

    /// `{output_dir}/{dataset}.{stage}.{tag}.{ext}`
    pub fn output_path(&self, stage: &str, tag: &str, ext: &str) -> PathBuf {
        self.output_dir.join(format!("{}.{stage}.{tag}.{ext}", self.dataset))
    }

    pub fn query_analysis_cache_path(&self, model: &str) -> PathBuf {
        self.query_analysis
            .cache
            .clone()
            .unwrap_or_else(|| self.output_path("query-analyses", &slug(model), "json"))
    }
}
