//! Prompt templates.
//!
//! A template file is a sequence of `### <section>` blocks: an optional
//! `system` block and one block per [`Step`]. Each step block is split by a
//! `--- input ---` line into fixed instructions and an input layout. All
//! query and document content is rendered after the instructions, and the
//! input layout must end with a content placeholder, so every prompt for a
//! given step starts with the same bytes regardless of the query or document.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/default.txt");

const SEPARATOR: &str = "--- input ---";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    QueryAnalysis,
    DocAnalysis,
    Judgment,
    /// Judgment without query or document analyses (ablation).
    DirectJudgment,
}

impl Step {
    pub const ALL: [Step; 4] = [
        Step::QueryAnalysis,
        Step::DocAnalysis,
        Step::Judgment,
        Step::DirectJudgment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::QueryAnalysis => "query_analysis",
            Step::DocAnalysis => "doc_analysis",
            Step::Judgment => "judgment",
            Step::DirectJudgment => "direct_judgment",
        }
    }

    pub fn from_name(name: &str) -> Option<Step> {
        Step::ALL.into_iter().find(|s| s.name() == name)
    }

    fn required_inputs(self) -> &'static [Slot] {
        match self {
            Step::QueryAnalysis => &[Slot::Query],
            Step::DocAnalysis => &[Slot::Query, Slot::QueryAnalysis, Slot::Doc],
            Step::Judgment => &[Slot::Query, Slot::QueryAnalysis, Slot::Doc, Slot::DocAnalysis],
            Step::DirectJudgment => &[Slot::Query, Slot::Doc],
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    QueryName,
    DocName,
    Relation,
    Query,
    QueryAnalysis,
    Doc,
    DocAnalysis,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "query_name" => Slot::QueryName,
            "doc_name" => Slot::DocName,
            "relation" => Slot::Relation,
            "query" => Slot::Query,
            "query_analysis" => Slot::QueryAnalysis,
            "doc" => Slot::Doc,
            "doc_analysis" => Slot::DocAnalysis,
            _ => return None,
        })
    }

    fn is_fixed(self) -> bool {
        matches!(self, Slot::QueryName | Slot::DocName | Slot::Relation)
    }

    fn name(self) -> &'static str {
        match self {
            Slot::QueryName => "query_name",
            Slot::DocName => "doc_name",
            Slot::Relation => "relation",
            Slot::Query => "query",
            Slot::QueryAnalysis => "query_analysis",
            Slot::Doc => "doc",
            Slot::DocAnalysis => "doc_analysis",
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(Slot),
}

/// Split `text` into literal runs and `{placeholder}` slots. Braces that do not
/// enclose a lowercase identifier are literal text.
fn pieces(text: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let ident = &after[..ident_len];
            let slot = Slot::parse(ident).ok_or_else(|| format!("unknown placeholder {{{ident}}}"))?;
            if open > 0 {
                out.push(Piece::Text(&rest[..open]));
            }
            out.push(Piece::Slot(slot));
            rest = &after[ident_len + 1..];
        } else {
            out.push(Piece::Text(&rest[..=open]));
            rest = after;
        }
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    Ok(out)
}

/// The user-facing names that adapt the template to a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateNames {
    pub query_name: String,
    pub doc_name: String,
    pub relation: String,
}

impl Default for TemplateNames {
    fn default() -> Self {
        TemplateNames {
            query_name: "query".into(),
            doc_name: "document".into(),
            relation: "substantially helps answer".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StepTemplate {
    /// Instructions with fixed placeholders already substituted.
    instruction: String,
    /// Input layout, fixed placeholders substituted, content slots kept.
    layout: String,
}

/// Content available when rendering a step.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInputs<'a> {
    pub query: Option<&'a str>,
    pub query_analysis: Option<&'a str>,
    pub document: Option<&'a str>,
    pub doc_analysis: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    names: TemplateNames,
    system: String,
    steps: BTreeMap<Step, StepTemplate>,
    hash: String,
}

impl PromptTemplate {
    pub fn parse(text: &str, names: TemplateNames) -> Result<Self, PipelineError> {
        let err = |m: String| PipelineError::Template(m);
        let mut sections: BTreeMap<String, String> = BTreeMap::new();
        let mut current: Option<(String, String)> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("### ") {
                if let Some((n, body)) = current.take() {
                    sections.insert(n, body);
                }
                let name = name.trim().to_string();
                if sections.contains_key(&name) {
                    return Err(err(format!("section `{name}` appears twice")));
                }
                current = Some((name, String::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !(line.trim().is_empty() || line.starts_with('#')) {
                return Err(err(format!("text before the first section: `{line}`")));
            }
        }
        if let Some((n, body)) = current {
            sections.insert(n, body);
        }

        let fixed = |slot: Slot| -> &str {
            match slot {
                Slot::QueryName => &names.query_name,
                Slot::DocName => &names.doc_name,
                Slot::Relation => &names.relation,
                _ => unreachable!(),
            }
        };
        // Substitute fixed slots, keep content slots as `{name}`.
        let bind_fixed = |text: &str, allowed: &[Slot], where_: &str| -> Result<String, PipelineError> {
            let mut out = String::new();
            for piece in pieces(text).map_err(|m| err(format!("{where_}: {m}")))? {
                match piece {
                    Piece::Text(t) => out.push_str(t),
                    Piece::Slot(s) if s.is_fixed() => out.push_str(fixed(s)),
                    Piece::Slot(s) if allowed.contains(&s) => {
                        out.push('{');
                        out.push_str(s.name());
                        out.push('}');
                    }
                    Piece::Slot(s) => {
                        return Err(err(format!("{where_}: placeholder {{{}}} is not allowed here", s.name())))
                    }
                }
            }
            Ok(out)
        };

        let system = match sections.remove("system") {
            Some(body) => bind_fixed(body.trim(), &[], "system")?,
            None => String::new(),
        };
        let mut steps = BTreeMap::new();
        for step in Step::ALL {
            let body = sections
                .remove(step.name())
                .ok_or_else(|| err(format!("missing section `{}`", step.name())))?;
            let (instruction, layout) = body
                .split_once(&format!("\n{SEPARATOR}\n"))
                .or_else(|| body.strip_prefix(&format!("{SEPARATOR}\n")).map(|l| ("", l)))
                .ok_or_else(|| err(format!("section `{}` has no `{SEPARATOR}` line", step.name())))?;
            let instruction = bind_fixed(instruction.trim(), &[], &format!("{} instructions", step.name()))?;
            let layout_text = layout.trim_matches('\n').trim_end();
            let layout = bind_fixed(layout_text, step.required_inputs(), &format!("{} input", step.name()))?;
            let used: Vec<Slot> = pieces(&layout)
                .expect("validated above")
                .into_iter()
                .filter_map(|p| match p {
                    Piece::Slot(s) => Some(s),
                    Piece::Text(_) => None,
                })
                .collect();
            for required in step.required_inputs() {
                if !used.contains(required) {
                    return Err(err(format!(
                        "{} input must use {{{}}}",
                        step.name(),
                        required.name()
                    )));
                }
            }
            let ends_with_content = matches!(
                pieces(&layout).expect("validated above").last(),
                Some(Piece::Slot(s)) if !s.is_fixed()
            );
            if !ends_with_content {
                return Err(err(format!(
                    "{} input must end with a content placeholder",
                    step.name()
                )));
            }
            steps.insert(step, StepTemplate { instruction, layout });
        }
        if let Some(extra) = sections.keys().next() {
            return Err(err(format!("unknown section `{extra}`")));
        }

        let mut hasher = Sha256::new();
        hasher.update(system.as_bytes());
        for (step, t) in &steps {
            for part in [step.name(), &t.instruction, &t.layout] {
                hasher.update([0u8]);
                hasher.update(part.as_bytes());
            }
        }
        let hash: String = hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();

        Ok(PromptTemplate {
            names,
            system,
            steps,
            hash,
        })
    }

    pub fn from_file(path: &Path, names: TemplateNames) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text, names)
    }

    pub fn default_with(names: TemplateNames) -> Self {
        Self::parse(DEFAULT_TEMPLATE, names).expect("bundled template is valid")
    }

    pub fn names(&self) -> &TemplateNames {
        &self.names
    }

    /// Short content hash of the fully bound template text. Changes whenever
    /// any instruction, layout or name changes.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn system_prompt(&self) -> &str {
        &self.system
    }

    /// Fixed text every user prompt of `step` starts with.
    pub fn instruction(&self, step: Step) -> &str {
        &self.steps[&step].instruction
    }

    pub fn render(&self, step: Step, inputs: &PromptInputs<'_>) -> Result<RenderedPrompt, PipelineError> {
        let value = |slot: Slot| -> Option<&str> {
            match slot {
                Slot::Query => inputs.query,
                Slot::QueryAnalysis => inputs.query_analysis,
                Slot::Doc => inputs.document,
                Slot::DocAnalysis => inputs.doc_analysis,
                _ => None,
            }
        };
        for &slot in step.required_inputs() {
            if value(slot).is_none() {
                return Err(PipelineError::MissingInput {
                    step,
                    input: slot.name(),
                });
            }
        }
        let t = &self.steps[&step];
        let mut user = String::with_capacity(t.instruction.len() + t.layout.len() + 256);
        user.push_str(&t.instruction);
        if !t.instruction.is_empty() {
            user.push_str("\n\n");
        }
        for piece in pieces(&t.layout).expect("validated at parse time") {
            match piece {
                Piece::Text(s) => user.push_str(s),
                Piece::Slot(s) => user.push_str(value(s).expect("checked above")),
            }
        }
        Ok(RenderedPrompt {
            system: self.system.clone(),
            user,
        })
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::default_with(TemplateNames::default())
    }
}
