//! Seeded synthetic retrieval corpus with a lexical/semantic query split.
//!
//! Every passage mentions a few *concepts* in their canonical surface form,
//! plus mid-frequency context words and common filler. Each concept has a
//! second surface form that never appears in any passage. Lexical queries
//! name their target's concepts canonically; semantic queries use the
//! alternate forms, so only the shared context words remain visible to term
//! matching.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, write_qrels, write_queries, Corpus, Passage, QrelSet, Query};
use crate::error::{Error, Result};

const CONCEPTS_PER_PASSAGE: usize = 4;
const CONTEXT_PER_PASSAGE: usize = 6;
const CONTEXT_VOCAB: usize = 40;
const FILLER_VOCAB: usize = 60;
const SENTENCES_PER_PASSAGE: usize = 3;
const FILLER_PER_SENTENCE: usize = 4;
const CONCEPTS_PER_QUERY: usize = 2;
const CONTEXT_PER_QUERY: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n_passages: usize,
    pub n_train_queries: usize,
    pub n_test_queries: usize,
    /// Number of concepts, each with a canonical and an alternate form.
    pub synonym_table_size: usize,
    pub lexical_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_passages: 2000,
            n_train_queries: 400,
            n_test_queries: 200,
            synonym_table_size: 40,
            lexical_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_passages == 0 || self.n_train_queries == 0 || self.n_test_queries == 0 {
            return Err(Error::invalid("synthetic corpus counts must be at least 1"));
        }
        if self.synonym_table_size < CONCEPTS_PER_PASSAGE {
            return Err(Error::invalid(format!(
                "synonym_table_size must be at least {CONCEPTS_PER_PASSAGE}"
            )));
        }
        if !(0.0..=1.0).contains(&self.lexical_fraction) {
            return Err(Error::invalid("lexical_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub qrels: QrelSet,
    /// Ids of the queries written with canonical concept forms.
    pub lexical: BTreeSet<String>,
}

impl SyntheticData {
    pub const CORPUS_FILE: &'static str = "corpus.jsonl";
    pub const TRAIN_QUERIES_FILE: &'static str = "train_queries.tsv";
    pub const TEST_QUERIES_FILE: &'static str = "test_queries.tsv";
    pub const QRELS_FILE: &'static str = "qrels.txt";

    /// Writes the four standard files into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(dir.join(Self::CORPUS_FILE), &self.corpus)?;
        write_queries(dir.join(Self::TRAIN_QUERIES_FILE), &self.train_queries)?;
        write_queries(dir.join(Self::TEST_QUERIES_FILE), &self.test_queries)?;
        write_qrels(dir.join(Self::QRELS_FILE), &self.qrels)
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gl", "kr", "pl", "st", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Draws `n` distinct pronounceable words not already in `seen`.
fn words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, seen: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Layout {
    concepts: Vec<usize>,
    context: Vec<usize>,
}

fn sentence(mut parts: Vec<&str>, rng: &mut ChaCha8Rng) -> String {
    parts.shuffle(rng);
    let mut s = parts.join(" ");
    if let Some(first) = s.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    s.push('.');
    s
}

pub fn make_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let canonical = words(&mut rng, spec.synonym_table_size, 3, &mut seen);
    let alternate = words(&mut rng, spec.synonym_table_size, 3, &mut seen);
    let context = words(&mut rng, CONTEXT_VOCAB, 2, &mut seen);
    let filler = words(&mut rng, FILLER_VOCAB, 1, &mut seen);

    let width = spec.n_passages.to_string().len();
    let mut layouts = Vec::with_capacity(spec.n_passages);
    let mut passages = Vec::with_capacity(spec.n_passages);
    for i in 0..spec.n_passages {
        let layout = Layout {
            concepts: sample(&mut rng, spec.synonym_table_size, CONCEPTS_PER_PASSAGE).into_vec(),
            context: sample(&mut rng, CONTEXT_VOCAB, CONTEXT_PER_PASSAGE).into_vec(),
        };
        let mut text = Vec::with_capacity(SENTENCES_PER_PASSAGE);
        for s in 0..SENTENCES_PER_PASSAGE {
            let mut parts: Vec<&str> = Vec::new();
            parts.extend(
                layout.concepts.iter().skip(s).step_by(SENTENCES_PER_PASSAGE).map(|&c| canonical[c].as_str()),
            );
            parts.extend(
                layout.context.iter().skip(s).step_by(SENTENCES_PER_PASSAGE).map(|&c| context[c].as_str()),
            );
            parts.push(canonical[layout.concepts[s % CONCEPTS_PER_PASSAGE]].as_str());
            for _ in 0..FILLER_PER_SENTENCE {
                parts.push(filler.choose(&mut rng).unwrap());
            }
            text.push(sentence(parts, &mut rng));
        }
        passages.push(Passage::new(format!("p{i:0width$}"), "", text.join(" ")));
        layouts.push(layout);
    }

    let n_queries = spec.n_train_queries + spec.n_test_queries;
    let targets: Vec<usize> = if n_queries <= spec.n_passages {
        sample(&mut rng, spec.n_passages, n_queries).into_vec()
    } else {
        (0..n_queries).map(|_| rng.gen_range(0..spec.n_passages)).collect()
    };

    let mut qrels = QrelSet::new();
    let mut lexical = BTreeSet::new();
    let mut split = |prefix: &str, targets: &[usize], rng: &mut ChaCha8Rng| -> Vec<Query> {
        let n = targets.len();
        let n_lexical = (spec.lexical_fraction * n as f64).round() as usize;
        let mut is_lexical: Vec<bool> = (0..n).map(|i| i < n_lexical).collect();
        is_lexical.shuffle(rng);
        let width = n.to_string().len();
        targets
            .iter()
            .zip(is_lexical)
            .enumerate()
            .map(|(i, (&t, lex))| {
                let layout = &layouts[t];
                let forms = if lex { &canonical } else { &alternate };
                let mut parts: Vec<&str> = layout
                    .concepts
                    .choose_multiple(rng, CONCEPTS_PER_QUERY)
                    .map(|&c| forms[c].as_str())
                    .collect();
                parts.extend(
                    layout
                        .context
                        .choose_multiple(rng, CONTEXT_PER_QUERY)
                        .map(|&c| context[c].as_str()),
                );
                parts.shuffle(rng);
                let id = format!("{prefix}{i:0width$}");
                qrels.insert(id.clone(), passages[t].id.clone(), 1);
                if lex {
                    lexical.insert(id.clone());
                }
                Query::new(id, parts.join(" "))
            })
            .collect()
    };
    let train_queries = split("train", &targets[..spec.n_train_queries], &mut rng);
    let test_queries = split("test", &targets[spec.n_train_queries..], &mut rng);

    Ok(SyntheticData {
        corpus: Corpus::new(passages)?,
        train_queries,
        test_queries,
        qrels,
        lexical,
    })
}
