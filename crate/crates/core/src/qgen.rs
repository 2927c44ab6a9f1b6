//! Synthetic query generation, round-trip filtering and two-round dual-encoder training.
//!
//! Queries are extracted from passages (one per sentence, or random word
//! crops). A pair survives the filter only if the first-round encoder ranks its
//! source passage first among all passages. The second-round encoder is the
//! first-round encoder fine-tuned on the survivors.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_words, term_hash, write_lines, Corpus, Query, Tokenizer};
use crate::dense::{encode, train_de, CorpusEncodings, DeTrainConfig, EncoderParams, TrainPair};
use crate::error::{Error, Result};

/// Generated queries with fewer tokens are dropped.
pub const MIN_QUERY_TOKENS: usize = 3;
pub const CROP_MIN_WORDS: usize = 4;
pub const CROP_MAX_WORDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub query: Query,
    pub source_passage_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    Sentence,
    Crop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub mode: GenMode,
    pub max_per_passage: usize,
    pub seed: u64,
    /// Generate from a seeded sample of this many passages instead of all of them.
    #[serde(default)]
    pub sample_passages: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mode: GenMode::Sentence,
            max_per_passage: 8,
            seed: 0,
            sample_passages: None,
        }
    }
}

/// Splits on `.`, `?` or `!` followed by whitespace or the end of text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if boundary {
                let s = text[start..i].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = i + c.len_utf8();
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn long_enough(text: &str) -> bool {
    split_words(text).take(MIN_QUERY_TOKENS).count() >= MIN_QUERY_TOKENS
}

fn passage_queries(text: &str, mode: GenMode, max_per_passage: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    match mode {
        GenMode::Sentence => split_sentences(text)
            .into_iter()
            .filter(|s| long_enough(s))
            .take(max_per_passage)
            .map(str::to_string)
            .collect(),
        GenMode::Crop => {
            let words: Vec<&str> = text.split_whitespace().collect();
            if words.is_empty() {
                return Vec::new();
            }
            (0..max_per_passage)
                .filter_map(|_| {
                    let len = rng.gen_range(CROP_MIN_WORDS..=CROP_MAX_WORDS).min(words.len());
                    let start = rng.gen_range(0..=words.len() - len);
                    let q = words[start..start + len].join(" ");
                    long_enough(&q).then_some(q)
                })
                .collect()
        }
    }
}

pub fn generate_queries(corpus: &Corpus, config: &GenConfig) -> Result<Vec<SyntheticPair>> {
    if config.max_per_passage == 0 {
        return Err(Error::invalid("max_per_passage must be at least 1"));
    }
    let positions: Vec<usize> = match config.sample_passages {
        Some(n) if n < corpus.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a3b1e);
            let mut picked = sample(&mut rng, corpus.len(), n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..corpus.len()).collect(),
    };
    let mut pairs = Vec::new();
    for pos in positions {
        let p = &corpus.passages()[pos];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ term_hash(&p.id));
        for (n, text) in passage_queries(&p.text, config.mode, config.max_per_passage, &mut rng)
            .into_iter()
            .enumerate()
        {
            pairs.push(SyntheticPair {
                query: Query::new(format!("gen:{}:{n}", p.id), text),
                source_passage_id: p.id.clone(),
            });
        }
    }
    Ok(pairs)
}

/// Keeps the pairs whose cosine 1-NN over the whole corpus is their source passage.
pub fn round_trip_filter(
    pairs: &[SyntheticPair],
    encoder: &EncoderParams,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
) -> Vec<SyntheticPair> {
    let encodings = CorpusEncodings::build(encoder, corpus, tokenizer);
    round_trip_filter_with(pairs, encoder, &encodings, tokenizer)
}

pub fn round_trip_filter_with(
    pairs: &[SyntheticPair],
    encoder: &EncoderParams,
    encodings: &CorpusEncodings,
    tokenizer: &Tokenizer,
) -> Vec<SyntheticPair> {
    let keep: Vec<bool> = pairs
        .par_iter()
        .map(|pair| {
            let q = encode(encoder, &tokenizer.query(&pair.query.text));
            encodings
                .search(&pair.query.id, &q, 1)
                .items
                .first()
                .is_some_and(|c| c.passage_id == pair.source_passage_id)
        })
        .collect();
    pairs
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect()
}

pub fn to_train_pairs(pairs: &[SyntheticPair], corpus: &Corpus) -> Result<Vec<TrainPair>> {
    pairs
        .iter()
        .map(|p| {
            let positive = corpus
                .get(&p.source_passage_id)
                .ok_or_else(|| Error::UnknownPassage(p.source_passage_id.clone()))?
                .clone();
            Ok(TrainPair {
                query: p.query.clone(),
                positive,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub before: usize,
    pub after: usize,
    pub kept_ratio: f64,
}

impl FilterReport {
    pub fn new(before: usize, after: usize) -> Self {
        let kept_ratio = if before == 0 { 0.0 } else { after as f64 / before as f64 };
        Self {
            before,
            after,
            kept_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterativeConfig {
    pub generation: GenConfig,
    /// First-round training.
    pub de0: DeTrainConfig,
    /// Fine-tuning epochs for the second round; other settings follow `de0`.
    pub de1_epochs: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            generation: GenConfig::default(),
            de0: DeTrainConfig::default(),
            de1_epochs: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub de0: EncoderParams,
    pub de1: EncoderParams,
    pub generated: Vec<SyntheticPair>,
    pub filtered: Vec<SyntheticPair>,
    pub report: FilterReport,
}

/// Generate → train DE0 → filter with DE0 → fine-tune DE0 on survivors into DE1.
pub fn iterative_train(corpus: &Corpus, config: &IterativeConfig, tokenizer: &Tokenizer) -> Result<IterativeOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("iterative training needs a nonempty corpus"));
    }
    let generated = generate_queries(corpus, &config.generation)?;
    if generated.is_empty() {
        return Err(Error::invalid("query generation produced no pairs; check passage text and generator mode"));
    }
    let de0 = train_de(&to_train_pairs(&generated, corpus)?, &config.de0, None, tokenizer)?.params;
    let filtered = round_trip_filter(&generated, &de0, corpus, tokenizer);
    let report = FilterReport::new(generated.len(), filtered.len());
    log::info!(
        "round-trip filter kept {}/{} pairs ({:.3})",
        report.after,
        report.before,
        report.kept_ratio
    );
    if filtered.is_empty() {
        return Err(Error::invalid(
            "round-trip filter removed every pair; inspect the generator mode or the first-round training config",
        ));
    }
    let de1_config = DeTrainConfig {
        epochs: config.de1_epochs,
        ..config.de0
    };
    let de1 = train_de(&to_train_pairs(&filtered, corpus)?, &de1_config, Some(de0.clone()), tokenizer)?.params;
    Ok(IterativeOutcome {
        de0,
        de1,
        generated,
        filtered,
        report,
    })
}

/// TSV `query_text<TAB>source_passage_id`.
pub fn write_pairs(path: impl AsRef<Path>, pairs: &[SyntheticPair]) -> Result<()> {
    for p in pairs {
        if p.query.text.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("query `{}` contains a tab or newline", p.query.id)));
        }
    }
    write_lines(
        path.as_ref(),
        pairs.iter().map(|p| format!("{}\t{}", p.query.text, p.source_passage_id)),
    )
}

/// Reads externally generated pairs; query ids are `gen:<line>`.
pub fn read_pairs(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<SyntheticPair>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (text, pid) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `query_text<TAB>source_passage_id`"))?;
        if text.trim().is_empty() {
            return Err(Error::parse(path, i + 1, "empty query text"));
        }
        if !corpus.contains(pid) {
            return Err(Error::parse(path, i + 1, format!("unknown passage `{pid}`")));
        }
        out.push(SyntheticPair {
            query: Query::new(format!("gen:{}", i + 1), text),
            source_passage_id: pid.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(format!("p{i}"), "", *t))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("A b c. D e f."), vec!["A b c", "D e f"]);
        assert_eq!(split_sentences("v1.2 is out! Really? yes"), vec!["v1.2 is out", "Really", "yes"]);
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn sentence_mode_pairs() {
        let c = corpus(&["A b c. D e f.", "too short. x"]);
        let cfg = GenConfig {
            mode: GenMode::Sentence,
            max_per_passage: 5,
            seed: 0,
            sample_passages: None,
        };
        let pairs = generate_queries(&c, &cfg).unwrap();
        let texts: Vec<&str> = pairs.iter().map(|p| p.query.text.as_str()).collect();
        assert_eq!(texts, ["A b c", "D e f"]);
        assert!(pairs.iter().all(|p| p.source_passage_id == "p0"));
        let one = generate_queries(&c, &GenConfig { max_per_passage: 1, ..cfg }).unwrap();
        assert_eq!(one.len(), 1);
        assert!(generate_queries(&c, &GenConfig { max_per_passage: 0, ..cfg }).is_err());
    }

    #[test]
    fn crop_mode_is_seeded() {
        let text = (0..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let c = corpus(&[&text, "a b c d e f g"]);
        let cfg = GenConfig {
            mode: GenMode::Crop,
            max_per_passage: 4,
            seed: 42,
            sample_passages: None,
        };
        let a = generate_queries(&c, &cfg).unwrap();
        let b = generate_queries(&c, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for p in &a {
            let n = p.query.text.split_whitespace().count();
            assert!((CROP_MIN_WORDS..=CROP_MAX_WORDS).contains(&n));
        }
        let other = generate_queries(&c, &GenConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sampling_passages() {
        let texts: Vec<String> = (0..10).map(|i| format!("alpha beta gamma{i}.")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let c = corpus(&refs);
        let cfg = GenConfig {
            sample_passages: Some(3),
            ..GenConfig::default()
        };
        let pairs = generate_queries(&c, &cfg).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs, generate_queries(&c, &cfg).unwrap());
    }

    #[test]
    fn single_passage_keeps_everything() {
        let tok = Tokenizer {
            vocab_size: 512,
            ..Tokenizer::default()
        };
        let c = corpus(&["one two three. four five six."]);
        let pairs = generate_queries(&c, &GenConfig::default()).unwrap();
        let enc = EncoderParams::random(512, 8, 0);
        assert_eq!(round_trip_filter(&pairs, &enc, &c, &tok), pairs);
    }

    #[test]
    fn pairs_tsv_round_trip() {
        let c = corpus(&["one two three. four five six."]);
        let pairs = generate_queries(&c, &GenConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_pairs(&path, &pairs).unwrap();
        let back = read_pairs(&path, &c).unwrap();
        assert_eq!(back.len(), pairs.len());
        assert!(back.iter().zip(&pairs).all(|(a, b)| a.query.text == b.query.text
            && a.source_passage_id == b.source_passage_id));
        std::fs::write(&path, "some query\tmissing\n").unwrap();
        assert!(read_pairs(&path, &c).is_err());
    }

    #[test]
    fn report_ratio() {
        let r = FilterReport::new(10, 4);
        assert_eq!(r.kept_ratio, 0.4);
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"before":10,"after":4,"kept_ratio":0.4}"#);
    }
}
