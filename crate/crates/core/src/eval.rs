//! Ranking metrics and TREC run files.
//!
//! A run file line is `qid Q0 docid rank score tag`. Metrics follow the
//! conventions of the standard TREC evaluator: linear gain nDCG, relevance means
//! grade > 0, and queries without any relevant judgment are left out of means.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateList;
use crate::corpus::{write_lines, QrelSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub run_tag: String,
    /// query id → `(passage id, score)` in rank order.
    pub rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    pub fn new(run_tag: impl Into<String>) -> Self {
        Self {
            run_tag: run_tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    pub fn from_lists(run_tag: impl Into<String>, lists: impl IntoIterator<Item = CandidateList>) -> Self {
        let mut run = Self::new(run_tag);
        for l in lists {
            run.rankings.insert(l.query_id.clone(), l.ranked());
        }
        run
    }

    pub fn insert(&mut self, query_id: impl Into<String>, ranking: Vec<(String, f64)>) {
        self.rankings.insert(query_id.into(), ranking);
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Checks per-query uniqueness and non-increasing scores.
    pub fn validate(&self) -> Result<()> {
        for (q, ranking) in &self.rankings {
            let mut seen = HashSet::new();
            for (i, (p, s)) in ranking.iter().enumerate() {
                if !seen.insert(p.as_str()) {
                    return Err(Error::invalid(format!("query `{q}` lists passage `{p}` twice")));
                }
                if !s.is_finite() {
                    return Err(Error::invalid(format!("query `{q}` has non-finite score for `{p}`")));
                }
                if i > 0 && ranking[i - 1].1 < *s {
                    return Err(Error::invalid(format!("query `{q}` scores increase at rank {}", i + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, ranking) in &self.rankings {
            for (i, (p, s)) in ranking.iter().enumerate() {
                out.push_str(&format!("{q} Q0 {p} {} {s} {}\n", i + 1, self.run_tag));
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_trec_string();
        write_lines(path.as_ref(), text.lines())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&content, path)
    }

    pub fn parse(content: &str, path: &Path) -> Result<Self> {
        let mut run = Self::default();
        let mut last_rank: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, line) in content.lines().enumerate() {
            let line_no = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            if f.len() != 6 {
                return Err(Error::parse(path, line_no, format!("expected 6 fields, found {}", f.len())));
            }
            let rank: usize = f[3]
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad rank `{}`", f[3])))?;
            let score: f64 = f[4]
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| Error::parse(path, line_no, format!("bad score `{}`", f[4])))?;
            if run.rankings.is_empty() {
                run.run_tag = f[5].to_string();
            }
            let (q, p) = (f[0].to_string(), f[2].to_string());
            if rank == 0 || last_rank.get(&q).is_some_and(|&r| rank <= r) {
                return Err(Error::parse(path, line_no, format!("rank {rank} out of order for `{q}`")));
            }
            if !seen.insert((q.clone(), p.clone())) {
                return Err(Error::parse(path, line_no, format!("duplicate passage `{p}` for `{q}`")));
            }
            let ranking = run.rankings.entry(q.clone()).or_default();
            if ranking.last().is_some_and(|&(_, prev)| prev < score) {
                return Err(Error::parse(path, line_no, format!("scores increase for `{q}`")));
            }
            ranking.push((p, score));
            last_rank.insert(q, rank);
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mrr,
    Ndcg,
    Recall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub cutoff: usize,
}

impl Metric {
    pub const MRR_10: Metric = Metric {
        kind: MetricKind::Mrr,
        cutoff: 10,
    };
    pub const NDCG_10: Metric = Metric {
        kind: MetricKind::Ndcg,
        cutoff: 10,
    };
    pub const RECALL_100: Metric = Metric {
        kind: MetricKind::Recall,
        cutoff: 100,
    };

    /// Per-query value; `ranking` is in rank order.
    pub fn score_query(&self, ranking: &[(String, f64)], qrels: &QrelSet, query_id: &str) -> f64 {
        let k = self.cutoff;
        let top = &ranking[..ranking.len().min(k)];
        match self.kind {
            MetricKind::Mrr => top
                .iter()
                .position(|(p, _)| qrels.grade(query_id, p) > 0)
                .map_or(0.0, |r| 1.0 / (r + 1) as f64),
            MetricKind::Ndcg => {
                let dcg: f64 = top
                    .iter()
                    .enumerate()
                    .map(|(r, (p, _))| qrels.grade(query_id, p) as f64 / ((r + 2) as f64).log2())
                    .sum();
                let mut grades: Vec<u32> = qrels.relevant(query_id).map(|(_, g)| g).collect();
                grades.sort_unstable_by(|a, b| b.cmp(a));
                let idcg: f64 = grades
                    .iter()
                    .take(k)
                    .enumerate()
                    .map(|(r, &g)| g as f64 / ((r + 2) as f64).log2())
                    .sum();
                if idcg == 0.0 {
                    0.0
                } else {
                    dcg / idcg
                }
            }
            MetricKind::Recall => {
                let total = qrels.relevant(query_id).count();
                if total == 0 {
                    return 0.0;
                }
                let hit = top.iter().filter(|(p, _)| qrels.grade(query_id, p) > 0).count();
                hit as f64 / total as f64
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Mrr => "mrr",
            MetricKind::Ndcg => "ndcg",
            MetricKind::Recall => "recall",
        };
        write!(f, "{name}@{}", self.cutoff)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::invalid(format!("metric `{s}` must look like `mrr@10`")))?;
        let kind = match name.to_ascii_lowercase().as_str() {
            "mrr" => MetricKind::Mrr,
            "ndcg" => MetricKind::Ndcg,
            "recall" => MetricKind::Recall,
            _ => return Err(Error::invalid(format!("unknown metric `{name}`"))),
        };
        let cutoff: usize = k
            .parse()
            .ok()
            .filter(|&c| c >= 1)
            .ok_or_else(|| Error::invalid(format!("bad cutoff in `{s}`")))?;
        Ok(Metric { kind, cutoff })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub cutoff: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Queries left out of the mean because they have no relevant judgment.
    pub excluded: usize,
}

/// Evaluates `metric` over `query_ids`; queries with no ranking score 0.
pub fn evaluate_queries<'a, I>(run: &RunFile, qrels: &QrelSet, metric: Metric, query_ids: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = &'a str>,
{
    if metric.cutoff == 0 {
        return Err(Error::invalid("metric cutoff must be at least 1"));
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for q in query_ids {
        if !qrels.has_relevant(q) {
            excluded += 1;
            continue;
        }
        let value = run.get(q).map_or(0.0, |r| metric.score_query(r, qrels, q));
        per_query.insert(q.to_string(), value);
    }
    if per_query.is_empty() {
        return Err(Error::invalid(format!("{metric}: no evaluated query has a relevant judgment")));
    }
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        metric: metric.to_string(),
        cutoff: metric.cutoff,
        per_query,
        mean,
        excluded,
    })
}

/// Evaluates over the queries present in the run.
pub fn evaluate(run: &RunFile, qrels: &QrelSet, metric: Metric) -> Result<MetricReport> {
    evaluate_queries(run, qrels, metric, run.rankings.keys().map(String::as_str))
}

pub fn mrr_at_k(run: &RunFile, qrels: &QrelSet, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, Metric { kind: MetricKind::Mrr, cutoff: k })
}

pub fn ndcg_at_k(run: &RunFile, qrels: &QrelSet, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, Metric { kind: MetricKind::Ndcg, cutoff: k })
}

pub fn recall_at_k(run: &RunFile, qrels: &QrelSet, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, Metric { kind: MetricKind::Recall, cutoff: k })
}

/// Left-aligned first column, right-aligned remaining columns.
pub fn format_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = fmt_row(headers);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}
