//! Hybrid sparse + dense retrieval.
//!
//! The hybrid query encoding is `[bm25, λ·de]` and the passage encoding is
//! `[bm25, de]`, so their inner product is `bm25_dot + λ·de_cosine`. The
//! concatenation is never materialized; the two dot products are summed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bm25::{encode_query, Bm25Index};
use crate::candidates::{top_k, CandidateList};
use crate::corpus::{write_bytes, Query, QrelSet};
use crate::dense::{encode, normalized, CorpusEncodings, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::Metric;

const FORMAT: &str = "hybrid-index";
const VERSION: u32 = 1;

/// Full-scale λ search grid: 50, 100, ..., 750.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=15).map(|i| 50.0 * i as f64).collect()
}

#[derive(Debug, Clone)]
pub struct HybridIndex {
    pub bm25: Bm25Index,
    pub encoder: EncoderParams,
    pub dense: CorpusEncodings,
    pub lambda: f64,
}

/// Per-passage score components for one query, in index order.
#[derive(Debug, Clone)]
pub struct ScoreParts {
    pub bm25: Vec<f64>,
    pub cosine: Vec<f64>,
}

impl ScoreParts {
    pub fn combined(&self, lambda: f64) -> impl Iterator<Item = f64> + '_ {
        self.bm25.iter().zip(&self.cosine).map(move |(b, c)| b + lambda * c)
    }
}

#[derive(Serialize, Deserialize)]
struct HybridManifest {
    format: String,
    version: u32,
    lambda: f64,
    bm25: String,
    encoder: String,
    encodings: String,
}

impl HybridIndex {
    pub fn new(bm25: Bm25Index, encoder: EncoderParams, dense: CorpusEncodings, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("λ must be finite and non-negative, got {lambda}")));
        }
        if bm25.passage_ids() != dense.ids.as_slice() {
            return Err(Error::invalid("BM25 index and dense encodings cover different passages"));
        }
        if encoder.dim != dense.dim {
            return Err(Error::invalid("encoder and corpus encodings differ in dimension"));
        }
        Ok(Self {
            bm25,
            encoder,
            dense,
            lambda,
        })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("λ must be finite and non-negative, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    /// Unit-normalized query encoding; zero when the query has no tokens.
    pub fn query_dense(&self, query: &Query) -> Vec<f64> {
        normalized(&encode(&self.encoder, &self.bm25.tokenizer.query(&query.text)))
    }

    pub fn score_parts(&self, query: &Query) -> ScoreParts {
        let bm25 = self.bm25.scores_dense(&encode_query(query, &self.bm25.tokenizer));
        let q = self.query_dense(query);
        let cosine = (0..self.dense.len())
            .map(|i| crate::dense::dot(&q, self.dense.row(i)))
            .collect();
        ScoreParts { bm25, cosine }
    }

    pub fn hybrid_score(&self, query: &Query, passage_id: &str) -> Result<f64> {
        let pos = self
            .dense
            .ids
            .iter()
            .position(|id| id == passage_id)
            .ok_or_else(|| Error::UnknownPassage(passage_id.to_string()))?;
        let qv = encode_query(query, &self.bm25.tokenizer);
        let bm25 = crate::bm25::dot(&qv, &self.bm25.passage_vector(pos));
        let cos = crate::dense::dot(&self.query_dense(query), self.dense.row(pos));
        Ok(bm25 + self.lambda * cos)
    }

    pub fn retrieve(&self, query: &Query, k_results: usize) -> CandidateList {
        let parts = self.score_parts(query);
        rank_parts(&self.dense.ids, &parts, self.lambda, &query.id, k_results)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.bm25.save(dir.join("bm25.json"))?;
        self.encoder.save(dir.join("encoder.bin"))?;
        self.dense.save(dir.join("encodings.bin"))?;
        let manifest = HybridManifest {
            format: FORMAT.into(),
            version: VERSION,
            lambda: self.lambda,
            bm25: "bm25.json".into(),
            encoder: "encoder.bin".into(),
            encodings: "encodings.bin".into(),
        };
        write_bytes(&dir.join("hybrid.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path: PathBuf = dir.join("hybrid.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: HybridManifest = serde_json::from_slice(&bytes)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Format(format!("{}: unsupported {} v{}", path.display(), m.format, m.version)));
        }
        Self::new(
            Bm25Index::load(dir.join(&m.bm25))?,
            EncoderParams::load(dir.join(&m.encoder))?,
            CorpusEncodings::load(dir.join(&m.encodings))?,
            m.lambda,
        )
    }
}

pub(crate) fn rank_parts(ids: &[String], parts: &ScoreParts, lambda: f64, query_id: &str, k: usize) -> CandidateList {
    let ranked = top_k(ids.iter().map(String::as_str).zip(parts.combined(lambda)), k);
    CandidateList::from_ranked(query_id, ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub metric: String,
    pub best: f64,
    /// `(λ, mean metric)` for every grid value, in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the grid λ maximizing `metric` on the judged queries; ties go to the smallest λ.
pub fn tune_lambda(
    index: &HybridIndex,
    queries: &[Query],
    qrels: &QrelSet,
    grid: &[f64],
    metric: Metric,
) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("λ grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid(format!("λ grid value {bad} is invalid")));
    }
    let judged: Vec<&Query> = queries.iter().filter(|q| qrels.has_relevant(&q.id)).collect();
    if judged.is_empty() {
        return Err(Error::invalid("λ tuning needs at least one judged query"));
    }
    let parts: Vec<ScoreParts> = judged.iter().map(|q| index.score_parts(q)).collect();
    let mut table = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let total: f64 = judged
            .iter()
            .zip(&parts)
            .map(|(q, p)| {
                let ranked = rank_parts(&index.dense.ids, p, lambda, &q.id, metric.cutoff).ranked();
                metric.score_query(&ranked, qrels, &q.id)
            })
            .sum();
        table.push((lambda, total / judged.len() as f64));
    }
    let mut best = table[0];
    for &(l, v) in &table[1..] {
        if v > best.1 || (v == best.1 && l < best.0) {
            best = (l, v);
        }
    }
    Ok(LambdaSearch {
        metric: metric.to_string(),
        best: best.0,
        table,
    })
}
