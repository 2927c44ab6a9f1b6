//! Passages, queries, relevance judgments and the hashing tokenizer.
//!
//! File formats:
//! - corpus: JSONL, one `{"id", "title", "text"}` object per line (`title` optional)
//! - queries: TSV, `id<TAB>text`
//! - qrels: TREC qrels, `qid 0 docid grade`

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TermId = u32;

pub const DEFAULT_VOCAB_SIZE: usize = 32_768;
pub const DEFAULT_QUERY_MAX_LEN: usize = 64;
pub const DEFAULT_PASSAGE_MAX_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Text fed to the encoders: `"title. text"`, or just the text when untitled.
    pub fn encoding_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}. {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// An ordered passage collection with an id → position index.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    positions: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::invalid(format!("passage at position {i} has an empty id")));
            }
            if positions.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self {
            passages,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.position(id).map(|i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }
}

/// Graded relevance judgments. Absent pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment, overwriting an earlier grade for the same pair.
    pub fn insert(&mut self, query_id: impl Into<String>, passage_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(passage_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    /// All judgments for a query, including grade-0 entries.
    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// Passages with grade > 0 for a query, in passage-id order.
    pub fn relevant<'a>(&'a self, query_id: &str) -> impl Iterator<Item = (&'a str, u32)> + 'a {
        self.judgments
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter())
            .filter(|(_, &g)| g > 0)
            .map(|(p, &g)| (p.as_str(), g))
    }

    pub fn has_relevant(&self, query_id: &str) -> bool {
        self.relevant(query_id).next().is_some()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(p, &g)| (q.as_str(), p.as_str(), g)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<TermId>,
    /// Token count before truncation.
    pub original_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Stable 64-bit FNV-1a of a token string.
pub fn term_hash(token: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

/// Splits `text` into lowercase alphanumeric runs.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize(text: &str, vocab_size: usize, max_length: usize) -> TokenSequence {
    assert!(vocab_size >= 2, "vocab_size must be at least 2");
    assert!(max_length >= 1, "max_length must be at least 1");
    let mut tokens = Vec::new();
    let mut original_length = 0;
    for word in split_words(text) {
        original_length += 1;
        if tokens.len() < max_length {
            tokens.push((term_hash(&word) % vocab_size as u64) as TermId);
        }
    }
    TokenSequence {
        tokens,
        original_length,
    }
}

/// Tokenizer settings shared by every model that reads text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub query_max_len: usize,
    pub passage_max_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            query_max_len: DEFAULT_QUERY_MAX_LEN,
            passage_max_len: DEFAULT_PASSAGE_MAX_LEN,
        }
    }
}

impl Tokenizer {
    pub fn query(&self, text: &str) -> TokenSequence {
        tokenize(text, self.vocab_size, self.query_max_len)
    }

    pub fn passage(&self, passage: &Passage) -> TokenSequence {
        tokenize(&passage.encoding_text(), self.vocab_size, self.passage_max_len)
    }

    pub fn corpus(&self, corpus: &Corpus) -> Vec<TokenSequence> {
        corpus.iter().map(|p| self.passage(p)).collect()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let mut passages = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let passage: Passage = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, i + 1, format!("malformed passage: {e}")))?;
        if passage.id.is_empty() {
            return Err(Error::parse(path, i + 1, "empty passage id"));
        }
        if passage.text.is_empty() {
            return Err(Error::parse(path, i + 1, format!("passage `{}` has empty text", passage.id)));
        }
        if seen.insert(passage.id.clone(), i + 1).is_some() {
            return Err(Error::parse(
                path,
                i + 1,
                format!("duplicate passage id `{}`", passage.id),
            ));
        }
        passages.push(passage);
    }
    Corpus::new(passages)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    parse_queries(&content, path)
}

fn parse_queries(content: &str, path: &Path) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `id<TAB>text`"))?;
        if id.is_empty() || text.trim().is_empty() {
            return Err(Error::parse(path, i + 1, "empty query id or text"));
        }
        if seen.insert(id.to_string(), i + 1).is_some() {
            return Err(Error::parse(path, i + 1, format!("duplicate query id `{id}`")));
        }
        queries.push(Query::new(id, text));
    }
    Ok(queries)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<QrelSet> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let mut qrels = QrelSet::new();
    for (i, line) in content.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 fields `qid 0 docid grade`, found {}", fields.len()),
            ));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("grade `{}` is not a non-negative integer", fields[3])))?;
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut w = create(path)?;
    for line in lines {
        w.write_all(line.as_ref().as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let lines = corpus
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path.as_ref(), lines)
}

pub fn write_queries(path: impl AsRef<Path>, queries: &[Query]) -> Result<()> {
    for q in queries {
        if q.text.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("query `{}` text contains a tab or newline", q.id)));
        }
    }
    write_lines(path.as_ref(), queries.iter().map(|q| format!("{}\t{}", q.id, q.text)))
}

pub fn write_qrels(path: impl AsRef<Path>, qrels: &QrelSet) -> Result<()> {
    write_lines(
        path.as_ref(),
        qrels.iter().map(|(q, p, g)| format!("{q} 0 {p} {g}")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tokenize_empty() {
        let t = tokenize("", 1000, 64);
        assert!(t.tokens.is_empty());
        assert_eq!(t.original_length, 0);
    }

    #[test]
    fn tokenize_folds_case() {
        let t = tokenize("Apple apple", 1000, 64);
        assert_eq!(t.tokens.len(), 2);
        assert_eq!(t.tokens[0], t.tokens[1]);
    }

    #[test]
    fn tokenize_truncates() {
        let t = tokenize("a b c d", 1000, 2);
        assert_eq!(t.tokens.len(), 2);
        assert_eq!(t.original_length, 4);
    }

    #[test]
    fn tokenize_splits_punctuation() {
        let a = tokenize("bm25,dense;hybrid!", 1000, 64);
        let b = tokenize("bm25 dense hybrid", 1000, 64);
        assert_eq!(a, b);
    }

    #[test]
    fn hash_is_stable() {
        // FNV-1a 64 reference values.
        assert_eq!(term_hash(""), 0xcbf29ce484222325);
        assert_eq!(term_hash("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn encoding_text_joins_title() {
        assert_eq!(Passage::new("d", "Title", "Body").encoding_text(), "Title. Body");
        assert_eq!(Passage::new("d", "", "Body").encoding_text(), "Body");
    }

    #[test]
    fn corpus_two_lines() {
        let f = tmp_file("{\"id\":\"d1\",\"title\":\"t\",\"text\":\"x\"}\n{\"id\":\"d2\",\"text\":\"y\"}\n");
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.position("d2"), Some(1));
        assert_eq!(c.get("d2").unwrap().title, "");
    }

    #[test]
    fn corpus_duplicate_names_id() {
        let f = tmp_file("{\"id\":\"d1\",\"text\":\"x\"}\n{\"id\":\"d1\",\"text\":\"y\"}\n");
        let err = load_corpus(f.path()).unwrap_err().to_string();
        assert!(err.contains("d1"), "{err}");
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn corpus_malformed_line_number() {
        let f = tmp_file("{\"id\":\"d1\",\"text\":\"x\"}\nnot json\n");
        match load_corpus(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn corpus_empty_file() {
        let f = tmp_file("");
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn queries_tsv() {
        let f = tmp_file("q1\twhat is bm25\n");
        let q = load_queries(f.path()).unwrap();
        assert_eq!(q, vec![Query::new("q1", "what is bm25")]);
    }

    #[test]
    fn queries_missing_tab() {
        let f = tmp_file("q1\tok\nq2 no tab\n");
        match load_queries(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn queries_duplicate_and_empty() {
        let f = tmp_file("q1\ta\nq1\tb\n");
        assert!(load_queries(f.path()).unwrap_err().to_string().contains("q1"));
        let f = tmp_file("");
        assert!(load_queries(f.path()).unwrap().is_empty());
    }

    #[test]
    fn qrels_parsing() {
        let f = tmp_file("q1 0 d1 1\nq1 0 d2 0\nq2 0 d1 1\nq2 0 d1 2\n");
        let q = load_qrels(f.path()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 1);
        assert_eq!(q.grade("q1", "d2"), 0);
        assert_eq!(q.judged("q1").unwrap().len(), 2);
        assert_eq!(q.relevant("q1").count(), 1);
        assert_eq!(q.grade("q2", "d1"), 2);
        assert_eq!(q.grade("q9", "d1"), 0);
    }

    #[test]
    fn qrels_bad_grade() {
        let f = tmp_file("q1 0 d1 1.5\n");
        assert!(matches!(load_qrels(f.path()), Err(Error::Parse { line: 1, .. })));
        let f = tmp_file("q1 0 d1 -1\n");
        assert!(load_qrels(f.path()).is_err());
    }
}
