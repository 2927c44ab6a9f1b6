//! BM25 as a sparse vector model.
//!
//! A query is its vector of term counts, a passage is its vector of saturated,
//! length-normalized, IDF-weighted term frequencies, and the BM25 score is their
//! dot product. The inverted index stores the passage vectors column-wise.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::{top_k, CandidateList};
use crate::corpus::{write_bytes, Corpus, Passage, Query, TermId, TokenSequence, Tokenizer};
use crate::error::{Error, Result};

const INDEX_FORMAT: &str = "bm25-index";
const INDEX_VERSION: u32 = 1;

/// Term-id → weight, stored sorted by term id with no zero entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(TermId, f64)>,
}

impl SparseVector {
    pub fn from_map(map: BTreeMap<TermId, f64>) -> Self {
        let entries = map
            .into_iter()
            .filter(|&(_, w)| w != 0.0)
            .inspect(|(_, w)| debug_assert!(w.is_finite()))
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[(TermId, f64)] {
        &self.entries
    }

    pub fn get(&self, term: TermId) -> f64 {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sum over shared term ids of `a[t] * b[t]`, accumulated in ascending term order.
pub fn dot(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    let (a, b) = (&a.entries, &b.entries);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    pub k: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k: 0.9, b: 0.8 }
    }
}

impl Bm25Params {
    pub fn new(k: f64, b: f64) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("BM25 params out of range: k={k}, b={b}")));
        }
        Ok(Self { k, b })
    }

    /// Named presets: `default` (0.9, 0.8), `msmarco-anserini` (0.82, 0.68),
    /// `beir-anserini` (0.9, 0.4).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "msmarco-anserini" => Some(Self { k: 0.82, b: 0.68 }),
            "beir-anserini" => Some(Self { k: 0.9, b: 0.4 }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Stats {
    pub doc_count: usize,
    pub idf: BTreeMap<TermId, f64>,
    pub avg_length: f64,
    pub lengths: BTreeMap<String, usize>,
}

impl Bm25Stats {
    pub fn idf(&self, term: TermId) -> f64 {
        self.idf.get(&term).copied().unwrap_or(0.0)
    }
}

/// `ln((N - df + 0.5) / (df + 0.5) + 1)`; never negative.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

fn term_counts(tokens: &[TermId]) -> BTreeMap<TermId, usize> {
    let mut counts = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

pub fn compute_stats(corpus: &Corpus, tokenizer: &Tokenizer) -> Result<Bm25Stats> {
    let tokens = tokenizer.corpus(corpus);
    stats_from_tokens(corpus, &tokens)
}

pub(crate) fn stats_from_tokens(corpus: &Corpus, tokens: &[TokenSequence]) -> Result<Bm25Stats> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot compute BM25 statistics over an empty corpus"));
    }
    let mut df: BTreeMap<TermId, usize> = BTreeMap::new();
    let mut lengths = BTreeMap::new();
    let mut total = 0usize;
    for (p, seq) in corpus.iter().zip(tokens) {
        for &t in term_counts(&seq.tokens).keys() {
            *df.entry(t).or_insert(0) += 1;
        }
        lengths.insert(p.id.clone(), seq.len());
        total += seq.len();
    }
    let n = corpus.len();
    let idf = df.into_iter().map(|(t, f)| (t, idf(n, f))).collect();
    Ok(Bm25Stats {
        doc_count: n,
        idf,
        avg_length: total as f64 / n as f64,
        lengths,
    })
}

/// Passage weight for one term.
pub fn term_weight(idf: f64, count: usize, length: usize, avg_length: f64, params: Bm25Params) -> f64 {
    let cnt = count as f64;
    let norm = if avg_length > 0.0 {
        1.0 - params.b + params.b * length as f64 / avg_length
    } else {
        1.0
    };
    idf * cnt * (params.k + 1.0) / (cnt + params.k * norm)
}

pub fn encode_passage_tokens(tokens: &TokenSequence, stats: &Bm25Stats, params: Bm25Params) -> SparseVector {
    let m = tokens.len();
    let map = term_counts(&tokens.tokens)
        .into_iter()
        .map(|(t, c)| (t, term_weight(stats.idf(t), c, m, stats.avg_length, params)))
        .collect();
    SparseVector::from_map(map)
}

pub fn encode_passage(passage: &Passage, tokenizer: &Tokenizer, stats: &Bm25Stats, params: Bm25Params) -> SparseVector {
    encode_passage_tokens(&tokenizer.passage(passage), stats, params)
}

pub fn encode_query_tokens(tokens: &TokenSequence) -> SparseVector {
    SparseVector::from_map(
        term_counts(&tokens.tokens)
            .into_iter()
            .map(|(t, c)| (t, c as f64))
            .collect(),
    )
}

pub fn encode_query(query: &Query, tokenizer: &Tokenizer) -> SparseVector {
    encode_query_tokens(&tokenizer.query(&query.text))
}

/// Inverted index over passage BM25 vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    format: String,
    version: u32,
    pub tokenizer: Tokenizer,
    pub params: Bm25Params,
    pub stats: Bm25Stats,
    passage_ids: Vec<String>,
    /// term → (passage position, weight), positions ascending.
    postings: BTreeMap<TermId, Vec<(u32, f64)>>,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, tokenizer: Tokenizer, params: Bm25Params) -> Result<Self> {
        let tokens = tokenizer.corpus(corpus);
        let stats = stats_from_tokens(corpus, &tokens)?;
        let mut postings: BTreeMap<TermId, Vec<(u32, f64)>> = BTreeMap::new();
        for (pos, seq) in tokens.iter().enumerate() {
            for &(t, w) in encode_passage_tokens(seq, &stats, params).entries() {
                postings.entry(t).or_default().push((pos as u32, w));
            }
        }
        Ok(Self {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            tokenizer,
            params,
            stats,
            passage_ids: corpus.iter().map(|p| p.id.clone()).collect(),
            postings,
        })
    }

    pub fn passage_ids(&self) -> &[String] {
        &self.passage_ids
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    /// Reassembles a passage's stored vector from the postings.
    pub fn passage_vector(&self, position: usize) -> SparseVector {
        let map = self
            .postings
            .iter()
            .filter_map(|(&t, list)| {
                list.binary_search_by_key(&(position as u32), |&(p, _)| p)
                    .ok()
                    .map(|i| (t, list[i].1))
            })
            .collect();
        SparseVector::from_map(map)
    }

    /// Dot-product scores for every passage sharing a term with the query, by position.
    ///
    /// Query terms are visited in ascending order so each accumulated score is
    /// bit-identical to `dot(query, passage)`.
    pub fn score_all(&self, query: &SparseVector) -> Vec<(usize, f64)> {
        let mut acc = vec![0.0f64; self.passage_ids.len()];
        let mut touched = vec![false; self.passage_ids.len()];
        let mut hits = Vec::new();
        for &(t, qw) in query.entries() {
            if let Some(list) = self.postings.get(&t) {
                for &(p, w) in list {
                    let p = p as usize;
                    acc[p] += qw * w;
                    if !touched[p] {
                        touched[p] = true;
                        hits.push(p);
                    }
                }
            }
        }
        hits.sort_unstable();
        hits.into_iter().map(|p| (p, acc[p])).collect()
    }

    /// Dense score array over all passages (zero for passages sharing no term).
    pub fn scores_dense(&self, query: &SparseVector) -> Vec<f64> {
        let mut out = vec![0.0; self.passage_ids.len()];
        for (p, s) in self.score_all(query) {
            out[p] = s;
        }
        out
    }

    pub fn retrieve(&self, query: &Query, k_results: usize) -> CandidateList {
        let qv = encode_query(query, &self.tokenizer);
        let scored = self.score_all(&qv);
        let ranked = top_k(
            scored.iter().map(|&(p, s)| (self.passage_ids[p].as_str(), s)),
            k_results,
        );
        CandidateList::from_ranked(query.id.clone(), ranked)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        write_bytes(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let index: Self = serde_json::from_slice(&bytes)?;
        if index.format != INDEX_FORMAT || index.version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "{}: expected {INDEX_FORMAT} v{INDEX_VERSION}, found {} v{}",
                path.display(),
                index.format,
                index.version
            )));
        }
        Ok(index)
    }
}
