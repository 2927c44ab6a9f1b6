//! Embedding-bag dual encoder.
//!
//! Queries and passages share one embedding table. An encoding is the mean of
//! the token embedding rows, relevance is cosine similarity, and training
//! minimizes the in-batch sampled softmax loss where every other positive in
//! the mini-batch acts as a negative.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{top_k, CandidateList};
use crate::corpus::{write_bytes, Corpus, Passage, Query, TermId, TokenSequence, Tokenizer};
use crate::error::{Error, Result};

const PARAMS_MAGIC: &[u8; 4] = b"HRDE";
const ENCODINGS_MAGIC: &[u8; 4] = b"HRCE";
const FORMAT_VERSION: u32 = 1;

/// Half-width of the uniform range used for fresh embeddings.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major `vocab_size × dim`.
    pub embeddings: Vec<f64>,
}

impl EncoderParams {
    /// Embeddings drawn i.i.d. from `U[-0.05, 0.05]`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Self {
            vocab_size,
            dim,
            seed,
            embeddings,
        }
    }

    pub fn row(&self, term: TermId) -> &[f64] {
        let start = term as usize * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    fn row_mut(&mut self, term: TermId) -> &mut [f64] {
        let start = term as usize * self.dim;
        &mut self.embeddings[start..start + self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.embeddings.len() * 8);
        out.extend_from_slice(PARAMS_MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.vocab_size as u64).unwrap();
        out.write_u64::<LittleEndian>(self.dim as u64).unwrap();
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        for &v in &self.embeddings {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        read_header(&mut r, PARAMS_MAGIC)?;
        let vocab_size = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let embeddings = read_f64s(&mut r, vocab_size * dim)?;
        Ok(Self {
            vocab_size,
            dim,
            seed,
            embeddings,
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

pub(crate) fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated or unreadable binary file: {e}"))
}

pub(crate) fn read_header(r: &mut Cursor<&[u8]>, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(truncated)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if remaining < n as u64 * 8 {
        return Err(Error::Format(format!("expected {n} floats, file too short")));
    }
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

pub type DenseVector = Vec<f64>;

/// Mean of the token embedding rows; the zero vector for an empty sequence.
pub fn encode(params: &EncoderParams, tokens: &TokenSequence) -> DenseVector {
    let mut out = vec![0.0; params.dim];
    if tokens.is_empty() {
        return out;
    }
    for &t in &tokens.tokens {
        for (o, v) in out.iter_mut().zip(params.row(t)) {
            *o += v;
        }
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Unit-length copy of `a`; zero stays zero.
pub fn normalized(a: &[f64]) -> DenseVector {
    let n = norm(a);
    if n == 0.0 {
        vec![0.0; a.len()]
    } else {
        a.iter().map(|x| x / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query: Query,
    pub positive: Passage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Embedding width used when training starts from a fresh table.
    pub dim: usize,
}

impl Default for DeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            learning_rate: 0.5,
            temperature: 0.05,
            seed: 0,
            dim: 32,
        }
    }
}

impl DeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.temperature > 0.0) || !(self.learning_rate > 0.0) || self.dim == 0 {
            return Err(Error::invalid(format!("invalid dual-encoder training config: {self:?}")));
        }
        Ok(())
    }
}

/// Sparse gradient over embedding rows.
#[derive(Debug, Default, Clone)]
pub struct RowGrad {
    pub rows: BTreeMap<TermId, Vec<f64>>,
}

impl RowGrad {
    pub(crate) fn add_mean(&mut self, tokens: &TokenSequence, grad: &[f64], dim: usize) {
        if tokens.is_empty() {
            return;
        }
        let scale = 1.0 / tokens.len() as f64;
        for &t in &tokens.tokens {
            let row = self.rows.entry(t).or_insert_with(|| vec![0.0; dim]);
            for (r, g) in row.iter_mut().zip(grad) {
                *r += g * scale;
            }
        }
    }
}

/// d cos(a, b) / d a, zero when either norm is zero.
pub(crate) fn cosine_grad(a: &[f64], b: &[f64]) -> DenseVector {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let c = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect()
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// In-batch softmax loss and its gradient over embedding rows.
pub fn in_batch_loss_and_grad(
    params: &EncoderParams,
    queries: &[&TokenSequence],
    passages: &[&TokenSequence],
    temperature: f64,
) -> (f64, RowGrad) {
    assert_eq!(queries.len(), passages.len());
    let b = queries.len();
    let q: Vec<DenseVector> = queries.iter().map(|t| encode(params, t)).collect();
    let p: Vec<DenseVector> = passages.iter().map(|t| encode(params, t)).collect();

    let mut loss = 0.0;
    let mut dq = vec![vec![0.0; params.dim]; b];
    let mut dp = vec![vec![0.0; params.dim]; b];
    for i in 0..b {
        let logits: Vec<f64> = p.iter().map(|pj| cosine(&q[i], pj) / temperature).collect();
        let lse = log_sum_exp(&logits);
        loss += lse - logits[i];
        for j in 0..b {
            let g = ((logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / (b as f64 * temperature);
            if g == 0.0 {
                continue;
            }
            for (d, c) in dq[i].iter_mut().zip(cosine_grad(&q[i], &p[j])) {
                *d += g * c;
            }
            for (d, c) in dp[j].iter_mut().zip(cosine_grad(&p[j], &q[i])) {
                *d += g * c;
            }
        }
    }

    let mut grad = RowGrad::default();
    for i in 0..b {
        grad.add_mean(queries[i], &dq[i], params.dim);
        grad.add_mean(passages[i], &dp[i], params.dim);
    }
    (loss / b as f64, grad)
}

/// Mean over the batch of `-log softmax` of each query's own positive among all batch positives.
pub fn in_batch_loss(params: &EncoderParams, batch: &[TrainPair], temperature: f64, tokenizer: &Tokenizer) -> f64 {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let qt: Vec<TokenSequence> = batch.iter().map(|p| tokenizer.query(&p.query.text)).collect();
    let pt: Vec<TokenSequence> = batch.iter().map(|p| tokenizer.passage(&p.positive)).collect();
    let qr: Vec<&TokenSequence> = qt.iter().collect();
    let pr: Vec<&TokenSequence> = pt.iter().collect();
    in_batch_loss_and_grad(params, &qr, &pr, temperature).0
}

#[derive(Debug, Clone)]
pub struct DeTrained {
    pub params: EncoderParams,
    /// Mean pre-update batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on the in-batch loss. Pairs are reshuffled each epoch from `config.seed`.
pub fn train_de(
    pairs: &[TrainPair],
    config: &DeTrainConfig,
    init: Option<EncoderParams>,
    tokenizer: &Tokenizer,
) -> Result<DeTrained> {
    if pairs.is_empty() {
        return Err(Error::invalid("dual-encoder training needs at least one pair"));
    }
    config.validate()?;
    let mut params = init.unwrap_or_else(|| EncoderParams::random(tokenizer.vocab_size, config.dim, config.seed));
    if params.vocab_size != tokenizer.vocab_size {
        return Err(Error::invalid(format!(
            "encoder vocab {} does not match tokenizer vocab {}",
            params.vocab_size, tokenizer.vocab_size
        )));
    }
    let qt: Vec<TokenSequence> = pairs.iter().map(|p| tokenizer.query(&p.query.text)).collect();
    let pt: Vec<TokenSequence> = pairs.iter().map(|p| tokenizer.passage(&p.positive)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_de00);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let qs: Vec<&TokenSequence> = chunk.iter().map(|&i| &qt[i]).collect();
            let ps: Vec<&TokenSequence> = chunk.iter().map(|&i| &pt[i]).collect();
            let (loss, grad) = in_batch_loss_and_grad(&params, &qs, &ps, config.temperature);
            total += loss;
            batches += 1;
            for (t, g) in grad.rows {
                for (w, gi) in params.row_mut(t).iter_mut().zip(g) {
                    *w -= config.learning_rate * gi;
                }
            }
        }
        epoch_losses.push(total / batches as f64);
    }
    if let (Some(first), Some(last)) = (epoch_losses.first(), epoch_losses.last()) {
        if last > first {
            log::warn!("dual-encoder training loss rose from {first:.6} to {last:.6}");
        }
    }
    Ok(DeTrained { params, epoch_losses })
}

/// Unit-normalized passage encodings in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEncodings {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `ids.len() × dim`, each row unit length or zero.
    pub rows: Vec<f64>,
}

impl CorpusEncodings {
    pub fn build(params: &EncoderParams, corpus: &Corpus, tokenizer: &Tokenizer) -> Self {
        let mut rows = Vec::with_capacity(corpus.len() * params.dim);
        for p in corpus.iter() {
            rows.extend(normalized(&encode(params, &tokenizer.passage(p))));
        }
        Self {
            dim: params.dim,
            ids: corpus.iter().map(|p| p.id.clone()).collect(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine of a query encoding against every passage, in corpus order.
    pub fn cosines(&self, query: &[f64]) -> Vec<f64> {
        let q = normalized(query);
        (0..self.len()).map(|i| dot(&q, self.row(i))).collect()
    }

    pub fn search(&self, query_id: &str, query: &[f64], k_results: usize) -> CandidateList {
        let scores = self.cosines(query);
        let ranked = top_k(self.ids.iter().map(String::as_str).zip(scores), k_results);
        CandidateList::from_ranked(query_id, ranked)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ENCODINGS_MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.ids.len() as u64).unwrap();
        out.write_u64::<LittleEndian>(self.dim as u64).unwrap();
        for (i, id) in self.ids.iter().enumerate() {
            out.write_u32::<LittleEndian>(id.len() as u32).unwrap();
            out.extend_from_slice(id.as_bytes());
            for &v in self.row(i) {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        read_header(&mut r, ENCODINGS_MAGIC)?;
        let n = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(truncated)?;
            ids.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
            rows.extend(read_f64s(&mut r, dim)?);
        }
        Ok(Self { dim, ids, rows })
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

/// Exhaustive cosine search over the corpus.
pub fn de_retrieve(
    params: &EncoderParams,
    corpus: &Corpus,
    query: &Query,
    k_results: usize,
    tokenizer: &Tokenizer,
) -> CandidateList {
    let enc = CorpusEncodings::build(params, corpus, tokenizer);
    let q = encode(params, &tokenizer.query(&query.text));
    enc.search(&query.id, &q, k_results)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use rand::Rng;

    fn seq(tokens: &[TermId]) -> TokenSequence {
        TokenSequence {
            tokens: tokens.to_vec(),
            original_length: tokens.len(),
        }
    }

    fn tiny(vocab: usize, dim: usize, seed: u64) -> EncoderParams {
        let mut p = EncoderParams::random(vocab, dim, seed);
        // larger spread than the training init keeps finite differences well conditioned
        p.embeddings.iter_mut().for_each(|x| *x *= 10.0);
        p
    }

    #[test]
    fn encode_cases() {
        let mut p = EncoderParams::random(4, 3, 1);
        p.row_mut(1).copy_from_slice(&[1.0, 2.0, 3.0]);
        p.row_mut(2).copy_from_slice(&[-1.0, -2.0, -3.0]);
        assert_eq!(encode(&p, &seq(&[1])), vec![1.0, 2.0, 3.0]);
        assert_eq!(encode(&p, &seq(&[1, 2])), vec![0.0, 0.0, 0.0]);
        assert_eq!(encode(&p, &seq(&[])), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), 1.0, epsilon = 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn batch_of_one_is_zero() {
        let p = tiny(10, 4, 3);
        let (loss, _) = in_batch_loss_and_grad(&p, &[&seq(&[1, 2])], &[&seq(&[3, 4, 5])], 0.05);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn two_example_fixture() {
        // q1 ∥ p1, q2 ∥ p2, p1 ⟂ p2
        let mut p = EncoderParams::random(4, 2, 0);
        p.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        p.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        p.row_mut(2).copy_from_slice(&[2.0, 0.0]);
        p.row_mut(3).copy_from_slice(&[0.0, 3.0]);
        let (loss, _) = in_batch_loss_and_grad(&p, &[&seq(&[0]), &seq(&[1])], &[&seq(&[2]), &seq(&[3])], 1.0);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.313262, epsilon = 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let dim = rng.gen_range(1..=8);
            let b = rng.gen_range(1..=4);
            let p = tiny(12, dim, trial);
            let mk = |rng: &mut ChaCha8Rng| {
                let n = rng.gen_range(1..=4);
                seq(&(0..n).map(|_| rng.gen_range(0..12)).collect::<Vec<_>>())
            };
            let qs: Vec<_> = (0..b).map(|_| mk(&mut rng)).collect();
            let ps: Vec<_> = (0..b).map(|_| mk(&mut rng)).collect();
            let qr: Vec<_> = qs.iter().collect();
            let pr: Vec<_> = ps.iter().collect();
            let tau = 0.5;
            let (_, grad) = in_batch_loss_and_grad(&p, &qr, &pr, tau);
            for (&t, g) in &grad.rows {
                for k in 0..dim {
                    let h = 1e-4;
                    let mut plus = p.clone();
                    plus.row_mut(t)[k] += h;
                    let mut minus = p.clone();
                    minus.row_mut(t)[k] -= h;
                    let fd = (in_batch_loss_and_grad(&plus, &qr, &pr, tau).0
                        - in_batch_loss_and_grad(&minus, &qr, &pr, tau).0)
                        / (2.0 * h);
                    let denom = fd.abs().max(g[k].abs()).max(1e-6);
                    assert!((fd - g[k]).abs() / denom <= 1e-3, "trial {trial} row {t}: fd {fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let tok = Tokenizer {
            vocab_size: 64,
            ..Tokenizer::default()
        };
        let init = EncoderParams::random(64, 4, 9);
        let pairs = vec![TrainPair {
            query: Query::new("q", "a b"),
            positive: Passage::new("d", "", "a b c"),
        }];
        let cfg = DeTrainConfig {
            epochs: 0,
            ..DeTrainConfig::default()
        };
        let out = train_de(&pairs, &cfg, Some(init.clone()), &tok).unwrap();
        assert_eq!(out.params, init);
        assert!(train_de(&[], &cfg, None, &tok).is_err());
    }

    #[test]
    fn de_retrieve_finds_exact_token() {
        let tok = Tokenizer {
            vocab_size: 1 << 16,
            ..Tokenizer::default()
        };
        let corpus = Corpus::new(vec![
            Passage::new("a", "", "alpha"),
            Passage::new("b", "", "bravo"),
            Passage::new("c", "", "charlie"),
        ])
        .unwrap();
        let p = EncoderParams::random(tok.vocab_size, 16, 5);
        let l = de_retrieve(&p, &corpus, &Query::new("q", "bravo"), 3, &tok);
        assert_eq!(l.items[0].passage_id, "b");
        assert_abs_diff_eq!(l.items[0].score, 1.0, epsilon = 1e-12);

        let single = Corpus::new(vec![Passage::new("only", "", "x")]).unwrap();
        let l = de_retrieve(&p, &single, &Query::new("q", "anything"), 5, &tok);
        assert_eq!(l.passage_ids().collect::<Vec<_>>(), ["only"]);
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let p = EncoderParams::random(50, 6, 77);
        let back = EncoderParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, back);
        assert!(EncoderParams::from_bytes(&p.to_bytes()[..20]).is_err());
        assert!(EncoderParams::from_bytes(b"NOPE\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn encodings_round_trip() {
        let tok = Tokenizer {
            vocab_size: 256,
            ..Tokenizer::default()
        };
        let corpus = Corpus::new(vec![Passage::new("a", "T", "x y"), Passage::new("b", "", "...")]).unwrap();
        let enc = CorpusEncodings::build(&EncoderParams::random(256, 4, 1), &corpus, &tok);
        assert_eq!(enc.row(1), &[0.0; 4]);
        assert_eq!(CorpusEncodings::from_bytes(&enc.to_bytes()).unwrap(), enc);
    }

    proptest! {
        #[test]
        fn loss_bounds_and_permutation(seed in 0u64..500, b in 1usize..6, tau in 0.05f64..2.0) {
            let p = tiny(20, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let qs: Vec<_> = (0..b).map(|_| seq(&[rng.gen_range(0..20), rng.gen_range(0..20)])).collect();
            let ps: Vec<_> = (0..b).map(|_| seq(&[rng.gen_range(0..20)])).collect();
            let (loss, _) = in_batch_loss_and_grad(&p, &qs.iter().collect::<Vec<_>>(), &ps.iter().collect::<Vec<_>>(), tau);
            prop_assert!(loss >= 0.0);
            prop_assert!(loss <= (b as f64).ln() + 2.0 / tau + 1e-12);
            let rq: Vec<_> = qs.iter().rev().collect();
            let rp: Vec<_> = ps.iter().rev().collect();
            let (rev, _) = in_batch_loss_and_grad(&p, &rq, &rp, tau);
            prop_assert!((rev - loss).abs() <= 1e-12);
        }
    }
}
