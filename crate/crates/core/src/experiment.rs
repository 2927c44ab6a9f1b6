//! End-to-end pipeline, the retriever × reranker ablation and the mixed-data baseline.
//!
//! Every artifact is written under the configured workdir, and a
//! `manifest.json` records the sha256 of each file read or written.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bm25::{Bm25Index, Bm25Params};
use crate::candidates::CandidateList;
use crate::corpus::{load_corpus, load_qrels, load_queries, term_hash, write_bytes, Corpus, QrelSet, Query, Tokenizer};
use crate::dense::{train_de, CorpusEncodings, DeTrainConfig, EncoderParams, TrainPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_queries, format_table, Metric, RunFile};
use crate::hybrid::{tune_lambda, HybridIndex, LambdaSearch};
use crate::qgen::{iterative_train, write_pairs, FilterReport, GenConfig, IterativeConfig};
use crate::reranker::{
    build_candidate_lists, rerank, train_reranker, write_candidate_lists, BuildReport, RerankerParams,
    RerankerTrainConfig, SamplingWindow,
};
use crate::synth::SyntheticData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retriever {
    Bm25,
    De,
    Hybrid,
}

impl Retriever {
    pub const ALL: [Retriever; 3] = [Retriever::Bm25, Retriever::De, Retriever::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Retriever::Bm25 => "bm25",
            Retriever::De => "de",
            Retriever::Hybrid => "hybrid",
        }
    }

    /// Conventional name of a reranker trained on this retriever's candidates.
    pub fn reranker_name(self) -> &'static str {
        match self {
            Retriever::Bm25 => "BM25RR",
            Retriever::De => "DERR",
            Retriever::Hybrid => "HYRR",
        }
    }
}

impl fmt::Display for Retriever {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Retriever {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bm25" => Ok(Retriever::Bm25),
            "de" => Ok(Retriever::De),
            "hybrid" => Ok(Retriever::Hybrid),
            _ => Err(Error::invalid(format!("unknown retriever `{s}`"))),
        }
    }
}

/// How the dual encoder gets its training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeTraining {
    /// Judged training queries; falls back to `Qgen` when none are judged.
    Supervised,
    /// Generated pairs, round-trip filtered, DE0 then DE1.
    Qgen,
    /// `Qgen`, then fine-tuned on the judged training queries.
    QgenThenSupervised,
}

mod metric_string {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::eval::Metric;

    pub fn serialize<S: Serializer>(m: &Metric, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Metric, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub train_queries: PathBuf,
    pub test_queries: PathBuf,
    pub qrels: PathBuf,
    pub workdir: PathBuf,
    pub tokenizer: Tokenizer,
    pub bm25: Bm25Params,
    pub de_training: DeTraining,
    pub de: DeTrainConfig,
    pub qgen: IterativeConfig,
    /// A single value fixes λ; several are searched on the held-out training queries.
    pub lambda_grid: Vec<f64>,
    /// Share of the training queries held out of dual-encoder training and used
    /// to pick λ. With 0, λ is picked on all training queries.
    pub lambda_dev_fraction: f64,
    #[serde(with = "metric_string")]
    pub tune_metric: Metric,
    /// Depth of every first-stage run.
    pub retrieval_depth: usize,
    pub window: SamplingWindow,
    pub sampling_seed: u64,
    /// `None` evaluates the first stage alone.
    pub reranker: Option<RerankerTrainConfig>,
    /// Run whose candidates build the reranker training lists.
    pub train_retriever: Retriever,
    /// Run that is reranked and evaluated.
    pub eval_retriever: Retriever,
    pub rerank_depth: usize,
    /// Adds the 1:1 BM25/DE mixed-data row to the ablation.
    pub ablation_mixed: bool,
}

impl ExperimentConfig {
    /// Desk-scale settings for a directory laid out like [`SyntheticData::write`].
    pub fn desk_scale(data_dir: impl AsRef<Path>, workdir: impl Into<PathBuf>) -> Self {
        let d = data_dir.as_ref();
        Self {
            corpus: d.join(SyntheticData::CORPUS_FILE),
            train_queries: d.join(SyntheticData::TRAIN_QUERIES_FILE),
            test_queries: d.join(SyntheticData::TEST_QUERIES_FILE),
            qrels: d.join(SyntheticData::QRELS_FILE),
            workdir: workdir.into(),
            tokenizer: Tokenizer::default(),
            bm25: Bm25Params::default(),
            de_training: DeTraining::QgenThenSupervised,
            de: DeTrainConfig {
                batch_size: 32,
                epochs: 30,
                learning_rate: 2.0,
                temperature: 0.05,
                seed: 0,
                dim: 32,
            },
            qgen: IterativeConfig {
                generation: GenConfig::default(),
                de0: DeTrainConfig {
                    batch_size: 64,
                    epochs: 10,
                    learning_rate: 2.0,
                    temperature: 0.05,
                    seed: 0,
                    dim: 32,
                },
                de1_epochs: 5,
            },
            lambda_grid: desk_lambda_grid(),
            lambda_dev_fraction: 0.25,
            tune_metric: Metric::MRR_10,
            retrieval_depth: 100,
            window: SamplingWindow {
                skip: 0,
                depth: 50,
                n_negatives: 15,
            },
            sampling_seed: 0,
            reranker: Some(RerankerTrainConfig {
                steps: 1500,
                batch_size: 16,
                learning_rate: 0.3,
                seed: 0,
                dim: 32,
                max_grad_norm: Some(5.0),
            }),
            train_retriever: Retriever::Hybrid,
            eval_retriever: Retriever::Bm25,
            rerank_depth: 50,
            ablation_mixed: true,
        }
    }

    /// Sets every seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.de.seed = seed;
        self.qgen.generation.seed = seed;
        self.qgen.de0.seed = seed;
        self.sampling_seed = seed;
        if let Some(r) = self.reranker.as_mut() {
            r.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::invalid("lambda_grid is empty"));
        }
        if !(0.0..1.0).contains(&self.lambda_dev_fraction) {
            return Err(Error::invalid("lambda_dev_fraction must lie in [0, 1)"));
        }
        if self.retrieval_depth == 0 || self.rerank_depth == 0 {
            return Err(Error::invalid("retrieval_depth and rerank_depth must be at least 1"));
        }
        self.window.validate()?;
        self.de.validate()?;
        self.qgen.de0.validate()?;
        Bm25Params::new(self.bm25.k, self.bm25.b)?;
        for p in [&self.corpus, &self.train_queries, &self.test_queries, &self.qrels] {
            if !p.exists() {
                return Err(Error::invalid(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

/// λ values suited to BM25 scores of a few dozen at most.
pub fn desk_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 50.0]
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Content hashes keyed by path: inputs as configured, outputs relative to the workdir.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }
}

/// Writes outputs under a root and records their hashes.
struct Artifacts<'a> {
    root: PathBuf,
    manifest: &'a mut Manifest,
}

impl Artifacts<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let hash = sha256_file(self.path(rel))?;
        self.manifest.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        write_json(&self.path(rel), value)?;
        self.record(rel)
    }

    fn run(&mut self, rel: &str, run: &RunFile) -> Result<()> {
        run.write(self.path(rel))?;
        self.record(rel)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Mean MRR@10, nDCG@10 and Recall@100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mrr_10: f64,
    pub ndcg_10: f64,
    pub recall_100: f64,
}

impl MetricSet {
    pub fn evaluate(run: &RunFile, qrels: &QrelSet, queries: &[Query]) -> Result<Self> {
        let ids = || queries.iter().map(|q| q.id.as_str());
        Ok(Self {
            mrr_10: evaluate_queries(run, qrels, Metric::MRR_10, ids())?.mean,
            ndcg_10: evaluate_queries(run, qrels, Metric::NDCG_10, ids())?.mean,
            recall_100: evaluate_queries(run, qrels, Metric::RECALL_100, ids())?.mean,
        })
    }
}

/// The loaded inputs and the trained first stage shared by every pipeline.
pub struct FirstStage {
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub qrels: QrelSet,
    pub tokenizer: Tokenizer,
    pub hybrid: HybridIndex,
    pub lambda_search: Option<LambdaSearch>,
    pub filter: Option<FilterReport>,
}

impl FirstStage {
    pub fn run(&self, retriever: Retriever, queries: &[Query], depth: usize) -> RunFile {
        let lists: Vec<CandidateList> = queries
            .par_iter()
            .map(|q| match retriever {
                Retriever::Bm25 => self.hybrid.bm25.retrieve(q, depth),
                Retriever::De => self.hybrid.dense.search(&q.id, &self.hybrid.query_dense(q), depth),
                Retriever::Hybrid => self.hybrid.retrieve(q, depth),
            })
            .collect();
        RunFile::from_lists(retriever.name(), lists)
    }
}

/// Judged training queries paired with their best-graded passage (ties: smallest id).
pub fn supervised_pairs(queries: &[Query], qrels: &QrelSet, corpus: &Corpus) -> Result<Vec<TrainPair>> {
    let mut out = Vec::new();
    for q in queries {
        let best = qrels
            .relevant(&q.id)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)));
        if let Some((pid, _)) = best {
            let positive = corpus.get(pid).ok_or_else(|| Error::UnknownPassage(pid.to_string()))?;
            out.push(TrainPair {
                query: q.clone(),
                positive: positive.clone(),
            });
        }
    }
    Ok(out)
}

fn train_encoder(
    config: &ExperimentConfig,
    corpus: &Corpus,
    supervised: &[TrainPair],
    out: &mut Artifacts,
) -> Result<(EncoderParams, Option<FilterReport>)> {
    let mode = match config.de_training {
        DeTraining::Supervised if supervised.is_empty() => {
            log::info!("no judged training queries; generating synthetic pairs instead");
            DeTraining::Qgen
        }
        m => m,
    };
    if mode == DeTraining::Supervised {
        let trained = train_de(supervised, &config.de, None, &config.tokenizer)?;
        out.json("de_losses.json", &trained.epoch_losses)?;
        return Ok((trained.params, None));
    }
    let it = iterative_train(corpus, &config.qgen, &config.tokenizer)?;
    write_pairs(out.path("qgen_generated.tsv"), &it.generated)?;
    out.record("qgen_generated.tsv")?;
    write_pairs(out.path("qgen_filtered.tsv"), &it.filtered)?;
    out.record("qgen_filtered.tsv")?;
    out.json("filter_report.json", &it.report)?;
    it.de0.save(out.path("de0.bin"))?;
    out.record("de0.bin")?;
    let mut params = it.de1;
    if mode == DeTraining::QgenThenSupervised && !supervised.is_empty() {
        let trained = train_de(supervised, &config.de, Some(params), &config.tokenizer)?;
        out.json("de_losses.json", &trained.epoch_losses)?;
        params = trained.params;
    }
    Ok((params, Some(it.report)))
}

fn prepare(config: &ExperimentConfig, manifest: &mut Manifest) -> Result<FirstStage> {
    stage("config", config.validate())?;
    let root = config.workdir.clone();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut out = Artifacts { root, manifest };
    out.json("config.json", config)?;

    let (corpus, train_queries, test_queries, qrels) = stage("load", (|| {
        let loaded = (
            load_corpus(&config.corpus)?,
            load_queries(&config.train_queries)?,
            load_queries(&config.test_queries)?,
            load_qrels(&config.qrels)?,
        );
        for p in [&config.corpus, &config.train_queries, &config.test_queries, &config.qrels] {
            out.manifest.input(p)?;
        }
        Ok(loaded)
    })())?;

    let bm25 = stage("index", (|| {
        let index = Bm25Index::build(&corpus, config.tokenizer, config.bm25)?;
        index.save(out.path("bm25.json"))?;
        out.record("bm25.json")?;
        Ok(index)
    })())?;

    let dev = lambda_dev_split(&train_queries, config.lambda_dev_fraction, config.sampling_seed);
    let (encoder, filter) = stage("train-de", (|| {
        let fit: Vec<Query> = train_queries.iter().filter(|q| !dev.contains(&q.id)).cloned().collect();
        let supervised = supervised_pairs(&fit, &qrels, &corpus)?;
        let (params, filter) = train_encoder(config, &corpus, &supervised, &mut out)?;
        params.save(out.path("de.bin"))?;
        out.record("de.bin")?;
        Ok((params, filter))
    })())?;

    let (hybrid, lambda_search) = stage("tune-lambda", (|| {
        let dense = CorpusEncodings::build(&encoder, &corpus, &config.tokenizer);
        let hybrid = HybridIndex::new(bm25, encoder, dense, config.lambda_grid[0])?;
        if config.lambda_grid.len() == 1 {
            return Ok((hybrid, None));
        }
        let tuning: Vec<Query> = if dev.is_empty() {
            train_queries.clone()
        } else {
            train_queries.iter().filter(|q| dev.contains(&q.id)).cloned().collect()
        };
        let search = tune_lambda(&hybrid, &tuning, &qrels, &config.lambda_grid, config.tune_metric)?;
        log::info!("tuned λ = {} ({} = {:.4})", search.best, search.metric, search_best_value(&search));
        out.json("lambda.json", &search)?;
        Ok((hybrid.with_lambda(search.best)?, Some(search)))
    })())?;

    Ok(FirstStage {
        corpus,
        train_queries,
        test_queries,
        qrels,
        tokenizer: config.tokenizer,
        hybrid,
        lambda_search,
        filter,
    })
}

/// Loads inputs, builds the BM25 index, trains the dual encoder and picks λ,
/// writing those artifacts under the workdir.
pub fn prepare_first_stage(config: &ExperimentConfig) -> Result<FirstStage> {
    prepare(config, &mut Manifest::default())
}

/// Seeded choice of `round(fraction · n)` query ids.
pub fn lambda_dev_split(queries: &[Query], fraction: f64, seed: u64) -> BTreeSet<String> {
    let n = (fraction * queries.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a4b_da00);
    sample(&mut rng, queries.len(), n.min(queries.len()))
        .into_iter()
        .map(|i| queries[i].id.clone())
        .collect()
}

fn search_best_value(s: &LambdaSearch) -> f64 {
    s.table.iter().find(|(l, _)| *l == s.best).map_or(f64::NAN, |(_, v)| *v)
}

fn train_from_run(
    config: &ExperimentConfig,
    fs: &FirstStage,
    rcfg: &RerankerTrainConfig,
    lists: &[CandidateList],
) -> Result<(RerankerParams, Vec<f64>)> {
    let trained = train_reranker(lists, &fs.train_queries, &fs.corpus, &config.tokenizer, rcfg, None)?;
    Ok((trained.params, trained.step_losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub lambda: f64,
    pub lambda_search: Option<LambdaSearch>,
    pub filter: Option<FilterReport>,
    pub build: Option<BuildReport>,
    pub first_stage: MetricSet,
    pub reranked: Option<MetricSet>,
    pub manifest: Manifest,
}

impl ExperimentReport {
    /// Metrics of the pipeline's final ranking.
    pub fn final_metrics(&self) -> MetricSet {
        self.reranked.unwrap_or(self.first_stage)
    }
}

/// index → dual encoder → λ → retrieve → training lists → reranker → rerank → evaluate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut manifest = Manifest::default();
    let fs = prepare(config, &mut manifest)?;
    let mut out = Artifacts {
        root: config.workdir.clone(),
        manifest: &mut manifest,
    };
    let depth = config.retrieval_depth.max(config.window.depth).max(config.rerank_depth);

    let eval_run = stage("retrieve", (|| {
        std::fs::create_dir_all(out.path("runs")).map_err(|e| Error::io(out.path("runs"), e))?;
        let run = fs.run(config.eval_retriever, &fs.test_queries, depth);
        out.run(&format!("runs/{}.test.trec", config.eval_retriever), &run)?;
        Ok(run)
    })())?;
    let first_stage = stage("eval", MetricSet::evaluate(&eval_run, &fs.qrels, &fs.test_queries))?;

    let mut build = None;
    let mut reranked = None;
    if let Some(rcfg) = &config.reranker {
        let lists = stage("gen-train", (|| {
            let run = fs.run(config.train_retriever, &fs.train_queries, depth);
            out.run(&format!("runs/{}.train.trec", config.train_retriever), &run)?;
            let (lists, report) = build_candidate_lists(&run, &fs.qrels, config.window, config.sampling_seed)?;
            write_candidate_lists(out.path("train_lists.jsonl"), &lists)?;
            out.record("train_lists.jsonl")?;
            out.json("build_report.json", &report)?;
            build = Some(report);
            Ok(lists)
        })())?;
        let params = stage("train-reranker", (|| {
            let (params, losses) = train_from_run(config, &fs, rcfg, &lists)?;
            params.save(out.path("reranker.bin"))?;
            out.record("reranker.bin")?;
            out.json("reranker_losses.json", &losses)?;
            Ok(params)
        })())?;
        let run = stage("rerank", (|| {
            let run = rerank(
                &params,
                &eval_run,
                &fs.test_queries,
                &fs.corpus,
                &config.tokenizer,
                config.rerank_depth,
                "reranked",
            )?;
            out.run("runs/reranked.test.trec", &run)?;
            Ok(run)
        })())?;
        reranked = Some(stage("eval", MetricSet::evaluate(&run, &fs.qrels, &fs.test_queries))?);
    }

    let mut report = ExperimentReport {
        lambda: fs.hybrid.lambda,
        lambda_search: fs.lambda_search.clone(),
        filter: fs.filter,
        build,
        first_stage,
        reranked,
        manifest: Manifest::default(),
    };
    stage("report", (|| {
        out.json("report.json", &report)?;
        let m = report.final_metrics();
        let table = format_table(
            &["run".into(), "MRR@10".into(), "nDCG@10".into(), "R@100".into()],
            &[vec![
                if report.reranked.is_some() { "reranked" } else { config.eval_retriever.name() }.to_string(),
                format!("{:.4}", m.mrr_10),
                format!("{:.4}", m.ndcg_10),
                format!("{:.4}", m.recall_100),
            ]],
        );
        write_bytes(&out.path("metrics.txt"), table.as_bytes())?;
        out.record("metrics.txt")?;
        write_json(&out.path("manifest.json"), &*out.manifest)
    })())?;
    report.manifest = manifest;
    Ok(report)
}

/// Per query present in both inputs, one whole list drawn from either source
/// by a seeded fair coin; queries covered by only one input keep that list.
/// Output is ordered by query id.
pub fn mix_training_data(lists_a: &[CandidateList], lists_b: &[CandidateList], seed: u64) -> Vec<CandidateList> {
    let a: BTreeMap<&str, &CandidateList> = lists_a.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let b: BTreeMap<&str, &CandidateList> = lists_b.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let mut ids: Vec<&str> = a.keys().chain(b.keys()).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|q| match (a.get(q), b.get(q)) {
            (Some(x), Some(y)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ term_hash(q));
                if rng.gen_bool(0.5) { *x } else { *y }
            }
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// One value per column, in [`AblationReport::columns`] order.
    pub mrr_10: Vec<f64>,
    pub ndcg_10: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub lambda: f64,
    pub columns: Vec<Retriever>,
    /// No reranker, then BM25RR, DERR, HYRR.
    pub rows: Vec<AblationRow>,
    pub mixed: Option<AblationRow>,
    pub first_stage: BTreeMap<Retriever, MetricSet>,
    pub manifest: Manifest,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().chain(&self.mixed).find(|r| r.name == name)
    }

    fn column(&self, r: Retriever) -> usize {
        self.columns.iter().position(|c| *c == r).expect("every retriever is a column")
    }

    pub fn mrr(&self, row: &str, column: Retriever) -> Option<f64> {
        self.row(row).map(|r| r.mrr_10[self.column(column)])
    }

    pub fn ndcg(&self, row: &str, column: Retriever) -> Option<f64> {
        self.row(row).map(|r| r.ndcg_10[self.column(column)])
    }

    /// One MRR@10 and one nDCG@10 block, rows × retrievers.
    pub fn to_table(&self) -> String {
        let mut headers = vec!["reranker".to_string()];
        for m in ["MRR@10", "nDCG@10"] {
            headers.extend(self.columns.iter().map(|c| format!("{m} {c}")));
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .chain(&self.mixed)
            .map(|r| {
                std::iter::once(r.name.clone())
                    .chain(r.mrr_10.iter().chain(&r.ndcg_10).map(|v| format!("{v:.4}")))
                    .collect()
            })
            .collect();
        format_table(&headers, &rows)
    }
}

pub const NO_RERANKER: &str = "none";
pub const MIXED: &str = "Mixed-1:1";

/// Rerankers trained on BM25, DE and Hybrid candidates, each applied to all three first stages.
pub fn ablation_matrix(config: &ExperimentConfig) -> Result<AblationReport> {
    let rcfg = config
        .reranker
        .ok_or_else(|| Error::invalid("the ablation needs a reranker config"))?;
    let mut manifest = Manifest::default();
    let fs = prepare(config, &mut manifest)?;
    let mut out = Artifacts {
        root: config.workdir.clone(),
        manifest: &mut manifest,
    };
    let depth = config.retrieval_depth.max(config.window.depth).max(config.rerank_depth);

    let (train_runs, test_runs) = stage("retrieve", (|| {
        std::fs::create_dir_all(out.path("runs")).map_err(|e| Error::io(out.path("runs"), e))?;
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for r in Retriever::ALL {
            let tr = fs.run(r, &fs.train_queries, depth);
            out.run(&format!("runs/{r}.train.trec"), &tr)?;
            train.insert(r, tr);
            let te = fs.run(r, &fs.test_queries, depth);
            out.run(&format!("runs/{r}.test.trec"), &te)?;
            test.insert(r, te);
        }
        Ok((train, test))
    })())?;

    let mut first_stage = BTreeMap::new();
    for (r, run) in &test_runs {
        first_stage.insert(*r, stage("eval", MetricSet::evaluate(run, &fs.qrels, &fs.test_queries))?);
    }

    let lists: HashMap<Retriever, Vec<CandidateList>> = stage("gen-train", (|| {
        let mut lists = HashMap::new();
        for r in Retriever::ALL {
            let (l, report) = build_candidate_lists(&train_runs[&r], &fs.qrels, config.window, config.sampling_seed)?;
            write_candidate_lists(out.path(&format!("lists.{r}.jsonl")), &l)?;
            out.record(&format!("lists.{r}.jsonl"))?;
            out.json(&format!("build_report.{r}.json"), &report)?;
            lists.insert(r, l);
        }
        Ok(lists)
    })())?;

    let mut sources: Vec<(String, Vec<CandidateList>)> = Retriever::ALL
        .iter()
        .map(|r| (r.reranker_name().to_string(), lists[r].clone()))
        .collect();
    if config.ablation_mixed {
        let mixed = mix_training_data(&lists[&Retriever::Bm25], &lists[&Retriever::De], config.sampling_seed);
        stage("gen-train", (|| {
            write_candidate_lists(out.path("lists.mixed.jsonl"), &mixed)?;
            out.record("lists.mixed.jsonl")
        })())?;
        sources.push((MIXED.to_string(), mixed));
    }

    let none = AblationRow {
        name: NO_RERANKER.to_string(),
        mrr_10: Retriever::ALL.iter().map(|r| first_stage[r].mrr_10).collect(),
        ndcg_10: Retriever::ALL.iter().map(|r| first_stage[r].ndcg_10).collect(),
    };
    let mut rows = vec![none];
    let mut mixed = None;
    for (name, source) in &sources {
        let slug = name.to_ascii_lowercase().replace(':', "-");
        let params = stage("train-reranker", (|| {
            let (params, losses) = train_from_run(config, &fs, &rcfg, source)?;
            params.save(out.path(&format!("reranker.{slug}.bin")))?;
            out.record(&format!("reranker.{slug}.bin"))?;
            out.json(&format!("reranker_losses.{slug}.json"), &losses)?;
            Ok(params)
        })())?;
        let mut row = AblationRow {
            name: name.clone(),
            mrr_10: Vec::new(),
            ndcg_10: Vec::new(),
        };
        for r in Retriever::ALL {
            let run = stage(
                "rerank",
                rerank(
                    &params,
                    &test_runs[&r],
                    &fs.test_queries,
                    &fs.corpus,
                    &config.tokenizer,
                    config.rerank_depth,
                    &format!("{slug}-{r}"),
                ),
            )?;
            stage("rerank", out.run(&format!("runs/{slug}.{r}.test.trec"), &run))?;
            let ids = || fs.test_queries.iter().map(|q| q.id.as_str());
            row.mrr_10
                .push(stage("eval", evaluate_queries(&run, &fs.qrels, Metric::MRR_10, ids()))?.mean);
            row.ndcg_10
                .push(stage("eval", evaluate_queries(&run, &fs.qrels, Metric::NDCG_10, ids()))?.mean);
        }
        if name == MIXED {
            mixed = Some(row);
        } else {
            rows.push(row);
        }
    }

    let mut report = AblationReport {
        lambda: fs.hybrid.lambda,
        columns: Retriever::ALL.to_vec(),
        rows,
        mixed,
        first_stage,
        manifest: Manifest::default(),
    };
    stage("report", (|| {
        out.json("ablation.json", &report)?;
        write_bytes(&out.path("ablation.txt"), report.to_table().as_bytes())?;
        out.record("ablation.txt")?;
        write_json(&out.path("manifest.json"), &*out.manifest)
    })())?;
    report.manifest = manifest;
    Ok(report)
}
