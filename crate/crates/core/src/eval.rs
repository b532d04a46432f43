//! nDCG@k evaluation, report tables, and judgment agreement between models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::ingest::{QrelSet, RunEntry};
use crate::pipeline::JudgmentRecord;
use crate::scoring::Verdict;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("run and qrels share no queries")]
    EmptyOverlap,
    #[error("run mixes tags `{0}` and `{1}`; evaluate one tag at a time")]
    MixedTags(String, String),
    #[error("judgment sets share no (query, doc) pairs")]
    NoSharedPairs,
    #[error("pair ({query_id}, {doc_id}) appears twice in one judgment set")]
    DuplicatePair { query_id: String, doc_id: String },
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(position: usize) -> f64 {
    ((position + 1) as f64).log2()
}

/// nDCG@k with exponential gain and a log2 discount.
///
/// The ideal ordering is taken over every judged document, retrieved or not.
/// A query without relevant documents scores 0.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], judged: Option<&BTreeMap<String, u32>>, k: usize) -> f64 {
    let Some(judged) = judged else { return 0.0 };
    let mut ideal: Vec<u32> = judged.values().copied().filter(|g| *g > 0).collect();
    if ideal.is_empty() || k == 0 {
        return 0.0;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| gain(*g) / discount(i + 1)).sum();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(d.as_ref()).copied().unwrap_or(0)) / discount(i + 1))
        .sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    /// Leave queries with no relevant documents out of the mean instead of
    /// counting them as 0.
    pub exclude_no_relevant: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: 10,
            exclude_no_relevant: false,
        }
    }
}

/// nDCG for one run on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub tag: String,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Run queries with no qrels entry.
    pub skipped: Vec<String>,
}

/// Evaluate a single-tag run against qrels.
///
/// Only queries present in both are scored. Queries in the run but not in the
/// qrels are listed in `skipped`; qrels queries the run never retrieved for
/// are ignored.
pub fn evaluate_run(
    dataset: &str,
    run: &[RunEntry],
    qrels: &QrelSet,
    options: EvalOptions,
    exec: Execution,
) -> Result<DatasetReport, EvalError> {
    if options.k == 0 {
        return Err(EvalError::InvalidK);
    }
    let tag = match run.first() {
        Some(e) => e.tag.clone(),
        None => return Err(EvalError::EmptyOverlap),
    };
    let mut grouped: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for e in run {
        if e.tag != tag {
            return Err(EvalError::MixedTags(tag, e.tag.clone()));
        }
        grouped.entry(&e.query_id).or_default().push(e);
    }
    let mut skipped = Vec::new();
    let mut scored: Vec<(&str, Vec<&RunEntry>)> = Vec::new();
    for (q, rows) in grouped {
        if qrels.for_query(q).is_some() {
            scored.push((q, rows));
        } else {
            log::warn!("{dataset}: query `{q}` has no qrels; skipped");
            skipped.push(q.to_string());
        }
    }
    if scored.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let values = exec.map(&scored, |(q, rows)| {
        let mut rows = rows.clone();
        rows.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.doc_id.cmp(&b.doc_id)));
        let ids: Vec<&str> = rows.iter().map(|r| r.doc_id.as_str()).collect();
        let judged = qrels.for_query(q);
        let has_relevant = judged.is_some_and(|j| j.values().any(|g| *g > 0));
        (q.to_string(), ndcg_at_k(&ids, judged, options.k), has_relevant)
    });
    let mut per_query = BTreeMap::new();
    let mut counted = Vec::new();
    for (q, v, has_relevant) in values {
        if has_relevant || !options.exclude_no_relevant {
            counted.push(v);
        }
        per_query.insert(q, v);
    }
    let mean = if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok(DatasetReport {
        dataset: dataset.to_string(),
        tag,
        k: options.k,
        per_query,
        mean,
        skipped,
    })
}

/// One run tag evaluated across datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub k: usize,
    pub datasets: Vec<DatasetReport>,
    /// Unweighted mean of the dataset means.
    pub macro_average: f64,
}

impl EvalReport {
    pub fn new(tag: &str, k: usize, datasets: Vec<DatasetReport>) -> Self {
        let macro_average = if datasets.is_empty() {
            0.0
        } else {
            datasets.iter().map(|d| d.mean).sum::<f64>() / datasets.len() as f64
        };
        EvalReport {
            tag: tag.to_string(),
            k,
            datasets,
            macro_average,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Datasets as rows, run tags as columns, values as nDCG x 100 with two
/// decimals, and a closing `Average` row. Cells with no value are `-`.
pub fn render_tsv(reports: &[EvalReport]) -> String {
    let datasets: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.datasets.iter().map(|d| d.dataset.as_str()))
        .collect();
    let mut out = String::from("dataset");
    for r in reports {
        write!(out, "\t{}", r.tag).unwrap();
    }
    out.push('\n');
    for ds in &datasets {
        out.push_str(ds);
        for r in reports {
            match r.datasets.iter().find(|d| d.dataset == *ds) {
                Some(d) => write!(out, "\t{:.2}", d.mean * 100.0).unwrap(),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out.push_str("Average");
    for r in reports {
        write!(out, "\t{:.2}", r.macro_average * 100.0).unwrap();
    }
    out.push('\n');
    out
}

/// Verdict agreement between two judgment sets over their shared pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub yes_yes: usize,
    pub yes_no: usize,
    pub no_yes: usize,
    pub no_no: usize,
    /// Pairs only in the first set.
    pub only_a: usize,
    /// Pairs only in the second set.
    pub only_b: usize,
}

impl AgreementMatrix {
    pub fn shared(&self) -> usize {
        self.yes_yes + self.yes_no + self.no_yes + self.no_no
    }

    /// Percentages of shared pairs, ordered (Yes,Yes), (Yes,No), (No,Yes), (No,No).
    pub fn percentages(&self) -> [f64; 4] {
        let n = self.shared() as f64;
        [self.yes_yes, self.yes_no, self.no_yes, self.no_no].map(|c| 100.0 * c as f64 / n)
    }

    pub fn render(&self, name_a: &str, name_b: &str) -> String {
        let [yy, yn, ny, nn] = self.percentages();
        let mut out = String::new();
        writeln!(out, "{name_a} \\ {name_b}\tYes\tNo").unwrap();
        writeln!(out, "Yes\t{} ({yy:.2}%)\t{} ({yn:.2}%)", self.yes_yes, self.yes_no).unwrap();
        writeln!(out, "No\t{} ({ny:.2}%)\t{} ({nn:.2}%)", self.no_yes, self.no_no).unwrap();
        writeln!(out, "shared\t{}", self.shared()).unwrap();
        writeln!(out, "only {name_a}\t{}", self.only_a).unwrap();
        writeln!(out, "only {name_b}\t{}", self.only_b).unwrap();
        out
    }
}

fn verdicts(records: &[JudgmentRecord]) -> Result<BTreeMap<(&str, &str), Verdict>, EvalError> {
    let mut map = BTreeMap::new();
    for r in records {
        let key = (r.query_id.as_str(), r.doc_id.as_str());
        if map.insert(key, Verdict::from_probs(r.p_yes, r.p_no)).is_some() {
            return Err(EvalError::DuplicatePair {
                query_id: r.query_id.clone(),
                doc_id: r.doc_id.clone(),
            });
        }
    }
    Ok(map)
}

/// Compare the verdicts (`p_yes >= p_no`) of two judgment sets, matched on
/// (query_id, doc_id).
pub fn agreement(a: &[JudgmentRecord], b: &[JudgmentRecord]) -> Result<AgreementMatrix, EvalError> {
    let va = verdicts(a)?;
    let vb = verdicts(b)?;
    let mut m = AgreementMatrix {
        yes_yes: 0,
        yes_no: 0,
        no_yes: 0,
        no_no: 0,
        only_a: 0,
        only_b: 0,
    };
    for (key, x) in &va {
        match (x, vb.get(key)) {
            (_, None) => m.only_a += 1,
            (Verdict::Yes, Some(Verdict::Yes)) => m.yes_yes += 1,
            (Verdict::Yes, Some(Verdict::No)) => m.yes_no += 1,
            (Verdict::No, Some(Verdict::Yes)) => m.no_yes += 1,
            (Verdict::No, Some(Verdict::No)) => m.no_no += 1,
        }
    }
    m.only_b = vb.keys().filter(|k| !va.contains_key(*k)).count();
    if m.shared() == 0 {
        return Err(EvalError::NoSharedPairs);
    }
    Ok(m)
}
