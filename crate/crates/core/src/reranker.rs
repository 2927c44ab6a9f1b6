//! Cross-attention reranker, listwise training, and rerank inference.
//!
//! The scorer embeds query and passage tokens, lets every query token attend
//! over the passage tokens with a single head, mean-pools the attended values
//! and projects the result to a scalar:
//!
//! ```text
//! Q = E_q W_q,  K = E_p W_k,  V = E_p W_v
//! A = softmax_rows(Q Kᵀ / √d)
//! s = w · mean_rows(A V) + b0
//! ```
//!
//! Training minimizes the listwise softmax cross entropy over candidate lists
//! made of one labeled positive and negatives sampled from a retriever's run.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{Candidate, CandidateList};
use crate::corpus::{
    term_hash, tokenize, write_bytes, write_lines, Corpus, Passage, Query, QrelSet, TermId, TokenSequence, Tokenizer,
};
use crate::dense::{log_sum_exp, read_f64s, read_header, truncated};
use crate::error::{Error, Result};
use crate::eval::RunFile;

const PARAMS_MAGIC: &[u8; 4] = b"HRRR";

/// Reranker input for a query: `"Query: {text}"`.
pub fn query_input(tokenizer: &Tokenizer, text: &str) -> TokenSequence {
    tokenizer.query(&format!("Query: {text}"))
}

/// Reranker input for a passage: `"Document: {title. text}"`. The marker token
/// is shared by every passage.
pub fn passage_input(tokenizer: &Tokenizer, passage: &Passage) -> TokenSequence {
    tokenize(
        &format!("Document: {}", passage.encoding_text()),
        tokenizer.vocab_size,
        tokenizer.passage_max_len,
    )
}

/// Initial attention logit between identical tokens.
pub const SELF_LOGIT: f64 = 6.0;

/// Anything that scores a tokenized (query, passage) pair.
pub trait PairScorer: Sync {
    fn score(&self, query: &TokenSequence, passage: &TokenSequence) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major `vocab_size × dim`.
    pub embeddings: Vec<f64>,
    /// Row-major `dim × dim` projections.
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub w: Vec<f64>,
    pub b0: f64,
}

impl RerankerParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self {
            vocab_size,
            dim,
            seed: 0,
            embeddings: vec![0.0; vocab_size * dim],
            wq: vec![0.0; dim * dim],
            wk: vec![0.0; dim * dim],
            wv: vec![0.0; dim * dim],
            w: vec![0.0; dim],
            b0: 0.0,
        }
    }

    /// `W_q`, `W_k` start near the identity and embedding rows have expected
    /// squared norm `SELF_LOGIT·√d`, so a query token's attention logit on an
    /// identical passage token starts near `SELF_LOGIT` while unrelated pairs
    /// start near 0 with unit spread.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_scale = (3.0 * SELF_LOGIT / (dim as f64).sqrt()).sqrt();
        let mat_scale = 1.0 / (dim as f64).sqrt();
        let embeddings = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-emb_scale..=emb_scale))
            .collect();
        let near_identity = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim * dim)
                .map(|i| {
                    let noise = rng.gen_range(-0.1..=0.1) * mat_scale;
                    if i / dim == i % dim {
                        1.0 + noise
                    } else {
                        noise
                    }
                })
                .collect()
        };
        let wq = near_identity(&mut rng);
        let wk = near_identity(&mut rng);
        let wv = (0..dim * dim).map(|_| rng.gen_range(-mat_scale..=mat_scale)).collect();
        let w = (0..dim).map(|_| rng.gen_range(-mat_scale..=mat_scale)).collect();
        Self {
            vocab_size,
            dim,
            seed,
            embeddings,
            wq,
            wk,
            wv,
            w,
            b0: 0.0,
        }
    }

    fn row(&self, t: TermId) -> &[f64] {
        &self.embeddings[t as usize * self.dim..(t as usize + 1) * self.dim]
    }

    fn gather(&self, tokens: &[TermId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            out.extend_from_slice(self.row(t));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.write_u32::<LittleEndian>(1).unwrap();
        out.write_u64::<LittleEndian>(self.vocab_size as u64).unwrap();
        out.write_u64::<LittleEndian>(self.dim as u64).unwrap();
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        for block in [&self.embeddings, &self.wq, &self.wk, &self.wv, &self.w] {
            for &v in block.iter() {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out.write_f64::<LittleEndian>(self.b0).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        read_header(&mut r, PARAMS_MAGIC)?;
        let vocab_size = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let embeddings = read_f64s(&mut r, vocab_size * dim)?;
        let wq = read_f64s(&mut r, dim * dim)?;
        let wk = read_f64s(&mut r, dim * dim)?;
        let wv = read_f64s(&mut r, dim * dim)?;
        let w = read_f64s(&mut r, dim)?;
        let b0 = r.read_f64::<LittleEndian>().map_err(truncated)?;
        Ok(Self {
            vocab_size,
            dim,
            seed,
            embeddings,
            wq,
            wk,
            wv,
            w,
            b0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `x (n × d) · m (d × d)`.
fn matmul(x: &[f64], m: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let oi = &mut out[i * d..(i + 1) * d];
        for (r, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let mr = &m[r * d..(r + 1) * d];
            for (o, &mv) in oi.iter_mut().zip(mr) {
                *o += xv * mv;
            }
        }
    }
    out
}

/// `x (n × d) · mᵀ`.
fn matmul_t(x: &[f64], m: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for r in 0..d {
            out[i * d + r] = xi.iter().zip(&m[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `acc += xᵀ (d × n) · y (n × d)`.
fn add_outer(acc: &mut [f64], x: &[f64], y: &[f64], d: usize) {
    let n = x.len() / d;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let yi = &y[i * d..(i + 1) * d];
        for (r, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (a, &yv) in acc[r * d..(r + 1) * d].iter_mut().zip(yi) {
                *a += xv * yv;
            }
        }
    }
}

struct Forward {
    eq: Vec<f64>,
    ep: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    pooled: Vec<f64>,
    score: f64,
}

fn forward(params: &RerankerParams, query: &[TermId], passage: &[TermId]) -> Forward {
    let d = params.dim;
    let (nq, np) = (query.len(), passage.len());
    let eq = params.gather(query);
    let ep = params.gather(passage);
    let q = matmul(&eq, &params.wq, d);
    let k = matmul(&ep, &params.wk, d);
    let v = matmul(&ep, &params.wv, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0; nq * np];
    let mut pooled = vec![0.0; d];
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut attn[i * np..(i + 1) * np];
        for j in 0..np {
            row[j] = scale * qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for a in row.iter_mut() {
            *a = (*a - max).exp();
            z += *a;
        }
        for (j, a) in row.iter_mut().enumerate() {
            *a /= z;
            for (p, vv) in pooled.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *p += *a * vv;
            }
        }
    }
    pooled.iter_mut().for_each(|p| *p /= nq as f64);
    let score = params.w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>() + params.b0;
    Forward {
        eq,
        ep,
        q,
        k,
        v,
        attn,
        pooled,
        score,
    }
}

/// Gradient of a scalar objective with respect to every reranker parameter.
#[derive(Debug, Clone)]
pub struct RerankerGrad {
    pub embeddings: BTreeMap<TermId, Vec<f64>>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub w: Vec<f64>,
    pub b0: f64,
}

impl RerankerGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            embeddings: BTreeMap::new(),
            wq: vec![0.0; dim * dim],
            wk: vec![0.0; dim * dim],
            wv: vec![0.0; dim * dim],
            w: vec![0.0; dim],
            b0: 0.0,
        }
    }

    fn add_rows(&mut self, tokens: &[TermId], grads: &[f64], d: usize) {
        for (i, &t) in tokens.iter().enumerate() {
            let row = self.embeddings.entry(t).or_insert_with(|| vec![0.0; d]);
            for (r, g) in row.iter_mut().zip(&grads[i * d..(i + 1) * d]) {
                *r += g;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let rows: f64 = self.embeddings.values().flatten().map(|g| g * g).sum();
        let mats: f64 = [&self.wq, &self.wk, &self.wv, &self.w]
            .into_iter()
            .flatten()
            .map(|g| g * g)
            .sum();
        (rows + mats + self.b0 * self.b0).sqrt()
    }

    /// `params -= lr · self`.
    pub fn apply(&self, params: &mut RerankerParams, lr: f64) {
        let d = params.dim;
        for (&t, g) in &self.embeddings {
            let row = &mut params.embeddings[t as usize * d..(t as usize + 1) * d];
            for (p, gi) in row.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        for (p, g) in [
            (&mut params.wq, &self.wq),
            (&mut params.wk, &self.wk),
            (&mut params.wv, &self.wv),
            (&mut params.w, &self.w),
        ] {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi -= lr * gi;
            }
        }
        params.b0 -= lr * self.b0;
    }
}

/// Adds `upstream · ∂score/∂params` for one pair into `grad`.
fn backward(params: &RerankerParams, query: &[TermId], passage: &[TermId], fwd: &Forward, upstream: f64, grad: &mut RerankerGrad) {
    let d = params.dim;
    let (nq, np) = (query.len(), passage.len());
    grad.b0 += upstream;
    for (g, p) in grad.w.iter_mut().zip(&fwd.pooled) {
        *g += upstream * p;
    }
    // every row of the attended output receives the same gradient
    let d_out: Vec<f64> = params.w.iter().map(|w| upstream * w / nq as f64).collect();

    let scale = 1.0 / (d as f64).sqrt();
    let mut dv = vec![0.0; np * d];
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; np * d];
    let da_base: Vec<f64> = (0..np)
        .map(|j| d_out.iter().zip(&fwd.v[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum())
        .collect();
    for i in 0..nq {
        let a = &fwd.attn[i * np..(i + 1) * np];
        let weighted: f64 = a.iter().zip(&da_base).map(|(x, y)| x * y).sum();
        for j in 0..np {
            for (g, o) in dv[j * d..(j + 1) * d].iter_mut().zip(&d_out) {
                *g += a[j] * o;
            }
            let ds = a[j] * (da_base[j] - weighted) * scale;
            if ds == 0.0 {
                continue;
            }
            for c in 0..d {
                dq[i * d + c] += ds * fwd.k[j * d + c];
                dk[j * d + c] += ds * fwd.q[i * d + c];
            }
        }
    }
    add_outer(&mut grad.wq, &fwd.eq, &dq, d);
    add_outer(&mut grad.wk, &fwd.ep, &dk, d);
    add_outer(&mut grad.wv, &fwd.ep, &dv, d);
    let deq = matmul_t(&dq, &params.wq, d);
    let mut dep = matmul_t(&dk, &params.wk, d);
    for (a, b) in dep.iter_mut().zip(matmul_t(&dv, &params.wv, d)) {
        *a += b;
    }
    grad.add_rows(query, &deq, d);
    grad.add_rows(passage, &dep, d);
}

fn check_pair(query: &TokenSequence, passage: &TokenSequence) -> Result<()> {
    if query.is_empty() || passage.is_empty() {
        return Err(Error::invalid("score_pair needs a nonempty query and passage"));
    }
    Ok(())
}

pub fn score_pair(params: &RerankerParams, query: &TokenSequence, passage: &TokenSequence) -> Result<f64> {
    check_pair(query, passage)?;
    Ok(forward(params, &query.tokens, &passage.tokens).score)
}

/// Score and its gradient with respect to all parameters.
pub fn score_pair_grad(params: &RerankerParams, query: &TokenSequence, passage: &TokenSequence) -> Result<(f64, RerankerGrad)> {
    check_pair(query, passage)?;
    let fwd = forward(params, &query.tokens, &passage.tokens);
    let mut grad = RerankerGrad::zeros(params.dim);
    backward(params, &query.tokens, &passage.tokens, &fwd, 1.0, &mut grad);
    Ok((fwd.score, grad))
}

impl PairScorer for RerankerParams {
    fn score(&self, query: &TokenSequence, passage: &TokenSequence) -> Result<f64> {
        score_pair(self, query, passage)
    }
}

fn check_labels(scores: &[f64], labels: &[u32]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "listwise loss needs equal nonempty lengths, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().all(|&l| l == 0) {
        return Err(Error::invalid("listwise loss needs at least one positive label"));
    }
    Ok(())
}

/// `-Σ_j y_j · log softmax(s)_j`.
pub fn listwise_loss(scores: &[f64], labels: &[u32]) -> Result<f64> {
    check_labels(scores, labels)?;
    let lse = log_sum_exp(scores);
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| y as f64 * (lse - s))
        .sum())
}

/// Loss and `∂loss/∂s_j = (Σy)·softmax_j − y_j`.
pub fn listwise_loss_grad(scores: &[f64], labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    let loss = listwise_loss(scores, labels)?;
    let lse = log_sum_exp(scores);
    let total: f64 = labels.iter().map(|&y| y as f64).sum();
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| total * (s - lse).exp() - y as f64)
        .collect();
    Ok((loss, grad))
}

/// Ranks `(skip, depth]` of a run, from which `n_negatives` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingWindow {
    pub skip: usize,
    pub depth: usize,
    pub n_negatives: usize,
}

impl SamplingWindow {
    /// 50 negatives from the top 250.
    pub fn supervised() -> Self {
        Self {
            skip: 0,
            depth: 250,
            n_negatives: 50,
        }
    }

    /// 50 negatives from ranks 10 through 210.
    pub fn zero_shot() -> Self {
        Self {
            skip: 9,
            depth: 210,
            n_negatives: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.skip >= self.depth || self.n_negatives > self.depth - self.skip {
            return Err(Error::invalid(format!("invalid sampling window {self:?}")));
        }
        Ok(())
    }
}

impl Default for SamplingWindow {
    fn default() -> Self {
        Self::supervised()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub lists: usize,
    /// Queries whose negative pool was smaller than requested.
    pub short: Vec<String>,
    /// Queries without any positive judgment.
    pub dropped: Vec<String>,
}

fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ term_hash(query_id))
}

/// One positive plus negatives sampled from the run window, per query.
///
/// The positive is drawn uniformly from the query's relevant passages and is
/// injected even when the retriever missed it. Retrieved passages with a
/// positive grade never serve as negatives.
pub fn build_candidate_lists(
    run: &RunFile,
    qrels: &QrelSet,
    window: SamplingWindow,
    seed: u64,
) -> Result<(Vec<CandidateList>, BuildReport)> {
    window.validate()?;
    let mut report = BuildReport::default();
    let mut lists = Vec::new();
    for (qid, ranking) in &run.rankings {
        let positives: Vec<(&str, u32)> = qrels.relevant(qid).collect();
        if positives.is_empty() {
            report.dropped.push(qid.clone());
            continue;
        }
        let mut rng = query_rng(seed, qid);
        let (pos_id, pos_grade) = *positives.choose(&mut rng).expect("nonempty");
        let pool: Vec<usize> = (window.skip..window.depth.min(ranking.len()))
            .filter(|&i| qrels.grade(qid, &ranking[i].0) == 0)
            .collect();
        let mut picked: Vec<usize> = if pool.len() <= window.n_negatives {
            if pool.len() < window.n_negatives {
                report.short.push(qid.clone());
            }
            pool
        } else {
            pool.choose_multiple(&mut rng, window.n_negatives).copied().collect()
        };
        picked.sort_unstable();

        let pos_rank = ranking.iter().position(|(p, _)| p == pos_id);
        let mut items = vec![Candidate {
            passage_id: pos_id.to_string(),
            score: pos_rank.map_or(0.0, |r| ranking[r].1),
            rank: 1,
            label: pos_grade,
            retriever_rank: pos_rank.map(|r| r + 1),
        }];
        for i in picked {
            items.push(Candidate {
                passage_id: ranking[i].0.clone(),
                score: ranking[i].1,
                rank: items.len() + 1,
                label: 0,
                retriever_rank: Some(i + 1),
            });
        }
        lists.push(CandidateList {
            query_id: qid.clone(),
            items,
        });
    }
    report.lists = lists.len();
    Ok((lists, report))
}

#[derive(Serialize, Deserialize)]
struct ListRecord {
    query_id: String,
    items: Vec<ItemRecord>,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    passage_id: String,
    label: u32,
    retriever_rank: Option<usize>,
}

pub fn write_candidate_lists(path: impl AsRef<Path>, lists: &[CandidateList]) -> Result<()> {
    let lines = lists
        .iter()
        .map(|l| {
            serde_json::to_string(&ListRecord {
                query_id: l.query_id.clone(),
                items: l
                    .items
                    .iter()
                    .map(|c| ItemRecord {
                        passage_id: c.passage_id.clone(),
                        label: c.label,
                        retriever_rank: c.retriever_rank,
                    })
                    .collect(),
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path.as_ref(), lines)
}

pub fn read_candidate_lists(path: impl AsRef<Path>) -> Result<Vec<CandidateList>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ListRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, format!("malformed list: {e}")))?;
        out.push(CandidateList {
            query_id: rec.query_id,
            items: rec
                .items
                .into_iter()
                .enumerate()
                .map(|(r, it)| Candidate {
                    passage_id: it.passage_id,
                    score: 0.0,
                    rank: r + 1,
                    label: it.label,
                    retriever_rank: it.retriever_rank,
                })
                .collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Width used when training starts from fresh parameters.
    pub dim: usize,
    /// Rescales each step's gradient to at most this global L2 norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 0.1,
            seed: 0,
            dim: 16,
            max_grad_norm: None,
        }
    }
}

/// Candidate lists resolved to token sequences.
pub struct TokenizedLists {
    queries: Vec<TokenSequence>,
    passages: Vec<Vec<usize>>,
    labels: Vec<Vec<u32>>,
    corpus_tokens: Vec<TokenSequence>,
}

impl TokenizedLists {
    pub fn new(lists: &[CandidateList], queries: &[Query], corpus: &Corpus, tokenizer: &Tokenizer) -> Result<Self> {
        let qmap: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
        let corpus_tokens = corpus.iter().map(|p| passage_input(tokenizer, p)).collect();
        let mut out = Self {
            queries: Vec::new(),
            passages: Vec::new(),
            labels: Vec::new(),
            corpus_tokens,
        };
        for l in lists {
            let q = qmap
                .get(l.query_id.as_str())
                .ok_or_else(|| Error::UnknownQuery(l.query_id.clone()))?;
            let qt = query_input(tokenizer, &q.text);
            if qt.is_empty() {
                return Err(Error::invalid(format!("query `{}` has no tokens", q.id)));
            }
            let mut pos = Vec::with_capacity(l.len());
            for c in &l.items {
                let p = corpus
                    .position(&c.passage_id)
                    .ok_or_else(|| Error::UnknownPassage(c.passage_id.clone()))?;
                if out.corpus_tokens[p].is_empty() {
                    return Err(Error::invalid(format!("passage `{}` has no tokens", c.passage_id)));
                }
                pos.push(p);
            }
            let labels: Vec<u32> = l.items.iter().map(|c| c.label).collect();
            if labels.iter().all(|&y| y == 0) {
                return Err(Error::invalid(format!("list for `{}` has no positive", l.query_id)));
            }
            out.queries.push(qt);
            out.passages.push(pos);
            out.labels.push(labels);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Listwise loss of list `i`, accumulating `scale · ∂loss` into `grad` when given.
    pub fn list_loss(&self, params: &RerankerParams, i: usize, grad: Option<(&mut RerankerGrad, f64)>) -> f64 {
        let q = &self.queries[i].tokens;
        let fwds: Vec<Forward> = self.passages[i]
            .iter()
            .map(|&p| forward(params, q, &self.corpus_tokens[p].tokens))
            .collect();
        let scores: Vec<f64> = fwds.iter().map(|f| f.score).collect();
        let (loss, dscores) = listwise_loss_grad(&scores, &self.labels[i]).expect("validated lists");
        if let Some((grad, scale)) = grad {
            for ((f, &p), ds) in fwds.iter().zip(&self.passages[i]).zip(dscores) {
                backward(params, q, &self.corpus_tokens[p].tokens, f, scale * ds, grad);
            }
        }
        loss
    }

    pub fn mean_loss(&self, params: &RerankerParams) -> f64 {
        (0..self.len()).map(|i| self.list_loss(params, i, None)).sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct RerankerTrained {
    pub params: RerankerParams,
    /// Mean batch loss of each step, before the update.
    pub step_losses: Vec<f64>,
}

/// SGD on the mean listwise loss over batches of lists.
pub fn train_reranker(
    lists: &[CandidateList],
    queries: &[Query],
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    config: &RerankerTrainConfig,
    init: Option<RerankerParams>,
) -> Result<RerankerTrained> {
    if lists.is_empty() {
        return Err(Error::invalid("reranker training needs at least one candidate list"));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || config.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
        return Err(Error::invalid(format!("invalid reranker config {config:?}")));
    }
    let mut params = init.unwrap_or_else(|| RerankerParams::random(tokenizer.vocab_size, config.dim, config.seed));
    if params.vocab_size != tokenizer.vocab_size {
        return Err(Error::invalid("reranker vocab does not match tokenizer"));
    }
    let data = TokenizedLists::new(lists, queries, corpus, tokenizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7272);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut step_losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut grad = RerankerGrad::zeros(params.dim);
        let mut total = 0.0;
        let b = config.batch_size.min(data.len());
        for _ in 0..b {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            total += data.list_loss(&params, i, Some((&mut grad, 1.0 / b as f64)));
        }
        step_losses.push(total / b as f64);
        let mut lr = config.learning_rate;
        if let Some(max) = config.max_grad_norm {
            let n = grad.norm();
            if n > max {
                lr *= max / n;
            }
        }
        grad.apply(&mut params, lr);
    }
    Ok(RerankerTrained { params, step_losses })
}

/// Rescores the top `top_k` of every ranking and sorts them by descending score.
///
/// Ties keep retrieval order. Passages below `top_k` follow in their original
/// order with scores shifted below the reranked block, so every output ranking
/// is a permutation of its input with non-increasing scores.
pub fn rerank<S: PairScorer>(
    scorer: &S,
    run: &RunFile,
    queries: &[Query],
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    top_k: usize,
    run_tag: &str,
) -> Result<RunFile> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    let qmap: HashMap<&str, &Query> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let entries: Vec<(&String, &Vec<(String, f64)>)> = run.rankings.iter().collect();
    let reranked: Vec<Result<(String, Vec<(String, f64)>)>> = entries
        .par_iter()
        .map(|(qid, ranking)| {
            let q = qmap.get(qid.as_str()).ok_or_else(|| Error::UnknownQuery((*qid).clone()))?;
            let qt = query_input(tokenizer, &q.text);
            let n = ranking.len().min(top_k);
            let mut block = Vec::with_capacity(n);
            for (orig, (pid, _)) in ranking[..n].iter().enumerate() {
                let passage = corpus.get(pid).ok_or_else(|| Error::UnknownPassage(pid.clone()))?;
                let s = scorer.score(&qt, &passage_input(tokenizer, passage))?;
                block.push((s, orig, pid.clone()));
            }
            block.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
            let floor = block.last().map_or(0.0, |b| b.0);
            let mut out: Vec<(String, f64)> = block.into_iter().map(|(s, _, p)| (p, s)).collect();
            for (i, (pid, _)) in ranking[n..].iter().enumerate() {
                if !corpus.contains(pid) {
                    return Err(Error::UnknownPassage(pid.clone()));
                }
                out.push((pid.clone(), floor - (i + 1) as f64));
            }
            Ok(((*qid).clone(), out))
        })
        .collect();
    let mut out = RunFile::new(run_tag);
    for r in reranked {
        let (q, ranking) = r?;
        out.insert(q, ranking);
    }
    Ok(out)
}
