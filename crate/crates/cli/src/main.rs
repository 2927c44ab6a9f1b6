use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hybrid_rerank::bm25::{Bm25Index, Bm25Params};
use hybrid_rerank::candidates::CandidateList;
use hybrid_rerank::corpus::{load_corpus, load_qrels, load_queries, Corpus, Tokenizer};
use hybrid_rerank::dense::{train_de, CorpusEncodings, DeTrainConfig, EncoderParams};
use hybrid_rerank::eval::{evaluate_queries, format_table, Metric, RunFile};
use hybrid_rerank::experiment::{
    ablation_matrix, mix_training_data, run_experiment, supervised_pairs, ExperimentConfig, Retriever,
};
use hybrid_rerank::hybrid::{tune_lambda, HybridIndex};
use hybrid_rerank::qgen::{
    generate_queries, read_pairs, round_trip_filter, to_train_pairs, write_pairs, FilterReport, GenConfig, GenMode,
};
use hybrid_rerank::reranker::{
    build_candidate_lists, read_candidate_lists, rerank, train_reranker, write_candidate_lists, RerankerParams,
    RerankerTrainConfig, SamplingWindow,
};
use hybrid_rerank::synth::{make_synthetic_corpus, SyntheticCorpusSpec};

#[derive(Parser)]
#[command(name = "hybrid-rerank", version, about = "Hybrid BM25 + dual-encoder retrieval and reranker training")]
struct Cli {
    /// Experiment config (JSON), used by `run` and `ablate`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config workdir; relative output paths of other commands resolve under it.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Seed for every random choice; overrides all seeds of a config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic lexical/semantic corpus.
    MakeSynth(MakeSynth),
    /// Write a desk-scale experiment config for a data directory.
    InitConfig(InitConfig),
    /// Build a BM25 index.
    Index(IndexCmd),
    /// Generate synthetic (query, passage) pairs.
    Qgen(QgenCmd),
    /// Train a dual encoder on judged queries or generated pairs.
    TrainDe(TrainDeCmd),
    /// Keep generated pairs whose 1-NN under a dual encoder is their source.
    Filter(FilterCmd),
    /// Pick λ on judged queries.
    TuneLambda(TuneLambdaCmd),
    /// Retrieve with BM25, the dual encoder, or the hybrid.
    Retrieve(RetrieveCmd),
    /// Build reranker training lists from a run.
    GenTrain(GenTrainCmd),
    /// Mix two sets of training lists 1:1 per query.
    Mix(MixCmd),
    /// Train the cross-attention reranker.
    TrainReranker(TrainRerankerCmd),
    /// Rerank the top of a run.
    Rerank(RerankCmd),
    /// Evaluate a run.
    Eval(EvalCmd),
    /// Run the full pipeline from a config.
    Run,
    /// Train BM25RR, DERR and HYRR and apply each to every retriever.
    Ablate,
}

#[derive(Args)]
struct MakeSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    passages: usize,
    #[arg(long, default_value_t = 400)]
    train_queries: usize,
    #[arg(long, default_value_t = 200)]
    test_queries: usize,
    #[arg(long, default_value_t = SyntheticCorpusSpec::default().synonym_table_size)]
    synonyms: usize,
    #[arg(long, default_value_t = 0.5)]
    lexical_fraction: f64,
}

#[derive(Args)]
struct InitConfig {
    /// Directory holding corpus.jsonl, train_queries.tsv, test_queries.tsv, qrels.txt.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `default`, `msmarco-anserini` or `beir-anserini`.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sentence,
    Crop,
}

#[derive(Args)]
struct QgenCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Sentence)]
    mode: ModeArg,
    #[arg(long, default_value_t = 8)]
    max_per_passage: usize,
    /// Generate from a seeded sample of this many passages.
    #[arg(long)]
    sample_passages: Option<usize>,
}

#[derive(Args)]
struct TrainDeCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// Training queries (TSV); requires --qrels.
    #[arg(long, requires = "qrels", conflicts_with = "pairs")]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Generated pairs (TSV `query<TAB>passage_id`).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Continue from an existing model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DeTrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = DeTrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = DeTrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = DeTrainConfig::default().temperature)]
    temperature: f64,
    #[arg(long, default_value_t = DeTrainConfig::default().dim)]
    dim: usize,
}

#[derive(Args)]
struct FilterCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write `{before, after, kept_ratio}`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FirstStageArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    bm25: PathBuf,
    /// Dual-encoder parameters.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct TuneLambdaCmd {
    #[command(flatten)]
    first: FirstStageArgs,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated λ values (default: the desk-scale grid).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value = "mrr@10")]
    metric: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveCmd {
    #[command(flatten)]
    first: FirstStageArgs,
    #[arg(long, value_parser = parse_retriever)]
    retriever: Retriever,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Supervised,
    ZeroShot,
}

#[derive(Args)]
struct GenTrainCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = WindowArg::Supervised)]
    window: WindowArg,
    /// Overrides the window's skip.
    #[arg(long)]
    skip: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
}

#[derive(Args)]
struct MixCmd {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRerankerCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    lists: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = RerankerTrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = RerankerTrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = RerankerTrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = RerankerTrainConfig::default().dim)]
    dim: usize,
    #[arg(long)]
    max_grad_norm: Option<f64>,
}

#[derive(Args)]
struct RerankCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value = "reranked")]
    tag: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Evaluate these queries (TSV) instead of those in the run.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "mrr@10,ndcg@10,recall@100")]
    metrics: Vec<String>,
    /// Also write the per-query reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_retriever(s: &str) -> Result<Retriever, String> {
    s.parse().map_err(|e: hybrid_rerank::Error| e.to_string())
}

struct Ctx {
    workdir: Option<PathBuf>,
    seed: u64,
    tokenizer: Tokenizer,
}

impl Ctx {
    /// Resolves an output path under the workdir and creates its parent.
    fn out(&self, p: &Path) -> Result<PathBuf> {
        let path = match &self.workdir {
            Some(w) if p.is_relative() => w.join(p),
            _ => p.to_path_buf(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
        }
        Ok(path)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_first_stage(args: &FirstStageArgs, lambda: f64, tokenizer: &Tokenizer) -> Result<(Corpus, HybridIndex)> {
    let corpus = load_corpus(&args.corpus)?;
    let bm25 = Bm25Index::load(&args.bm25)?;
    if bm25.passage_ids() != corpus.iter().map(|p| p.id.clone()).collect::<Vec<_>>() {
        bail!("{} was not built from {}", args.bm25.display(), args.corpus.display());
    }
    let encoder = match &args.model {
        Some(m) => EncoderParams::load(m)?,
        // BM25-only use: a placeholder encoder that λ = 0 ignores.
        None => EncoderParams::random(tokenizer.vocab_size, 1, 0),
    };
    let dense = CorpusEncodings::build(&encoder, &corpus, tokenizer);
    Ok((corpus, HybridIndex::new(bm25, encoder, dense, lambda)?))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("this command needs --config")?;
    let mut config = ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(w) = &cli.workdir {
        config.workdir = w.clone();
    }
    if let Some(s) = cli.seed {
        config = config.with_seed(s);
    }
    Ok(config)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
        seed: cli.seed.unwrap_or(0),
        tokenizer: Tokenizer::default(),
    };
    match &cli.command {
        Command::MakeSynth(a) => {
            let spec = SyntheticCorpusSpec {
                n_passages: a.passages,
                n_train_queries: a.train_queries,
                n_test_queries: a.test_queries,
                synonym_table_size: a.synonyms,
                lexical_fraction: a.lexical_fraction,
                seed: ctx.seed,
            };
            let data = make_synthetic_corpus(&spec)?;
            let out = ctx.out(&a.out)?;
            data.write(&out)?;
            println!(
                "wrote {} passages, {} train and {} test queries to {}",
                data.corpus.len(),
                data.train_queries.len(),
                data.test_queries.len(),
                out.display()
            );
        }
        Command::InitConfig(a) => {
            let workdir = cli.workdir.clone().unwrap_or_else(|| PathBuf::from("work"));
            let config = ExperimentConfig::desk_scale(&a.data, workdir).with_seed(ctx.seed);
            config.save(&a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::Index(a) => {
            let mut params = Bm25Params::preset(&a.preset).with_context(|| format!("unknown preset `{}`", a.preset))?;
            params = Bm25Params::new(a.k.unwrap_or(params.k), a.b.unwrap_or(params.b))?;
            let corpus = load_corpus(&a.corpus)?;
            let index = Bm25Index::build(&corpus, ctx.tokenizer, params)?;
            let out = ctx.out(&a.out)?;
            index.save(&out)?;
            println!("indexed {} passages (k={}, b={}) into {}", index.len(), params.k, params.b, out.display());
        }
        Command::Qgen(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let config = GenConfig {
                mode: match a.mode {
                    ModeArg::Sentence => GenMode::Sentence,
                    ModeArg::Crop => GenMode::Crop,
                },
                max_per_passage: a.max_per_passage,
                seed: ctx.seed,
                sample_passages: a.sample_passages,
            };
            let pairs = generate_queries(&corpus, &config)?;
            let out = ctx.out(&a.out)?;
            write_pairs(&out, &pairs)?;
            println!("generated {} pairs into {}", pairs.len(), out.display());
        }
        Command::TrainDe(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let pairs = match (&a.queries, &a.qrels, &a.pairs) {
                (Some(q), Some(r), None) => supervised_pairs(&load_queries(q)?, &load_qrels(r)?, &corpus)?,
                (None, None, Some(p)) => to_train_pairs(&read_pairs(p, &corpus)?, &corpus)?,
                _ => bail!("give either --queries with --qrels, or --pairs"),
            };
            let config = DeTrainConfig {
                batch_size: a.batch_size,
                epochs: a.epochs,
                learning_rate: a.lr,
                temperature: a.temperature,
                seed: ctx.seed,
                dim: a.dim,
            };
            let init = a.init.as_ref().map(EncoderParams::load).transpose()?;
            let trained = train_de(&pairs, &config, init, &ctx.tokenizer)?;
            let out = ctx.out(&a.out)?;
            trained.params.save(&out)?;
            if let (Some(f), Some(l)) = (trained.epoch_losses.first(), trained.epoch_losses.last()) {
                println!("trained on {} pairs, loss {f:.4} -> {l:.4}; saved {}", pairs.len(), out.display());
            }
        }
        Command::Filter(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let pairs = read_pairs(&a.pairs, &corpus)?;
            let model = EncoderParams::load(&a.model)?;
            let kept = round_trip_filter(&pairs, &model, &corpus, &ctx.tokenizer);
            let report = FilterReport::new(pairs.len(), kept.len());
            write_pairs(ctx.out(&a.out)?, &kept)?;
            if let Some(r) = &a.report {
                write_json(&ctx.out(r)?, &report)?;
            }
            println!("kept {}/{} pairs ({:.3})", report.after, report.before, report.kept_ratio);
        }
        Command::TuneLambda(a) => {
            let (_, index) = load_first_stage(&a.first, 0.0, &ctx.tokenizer)?;
            let grid = a.grid.clone().unwrap_or_else(hybrid_rerank::experiment::desk_lambda_grid);
            let metric: Metric = a.metric.parse()?;
            let search = tune_lambda(&index, &load_queries(&a.queries)?, &load_qrels(&a.qrels)?, &grid, metric)?;
            write_json(&ctx.out(&a.out)?, &search)?;
            let rows: Vec<Vec<String>> = search
                .table
                .iter()
                .map(|(l, v)| vec![format!("{l}"), format!("{v:.4}")])
                .collect();
            print!("{}", format_table(&["lambda".into(), search.metric.clone()], &rows));
            println!("best λ = {}", search.best);
        }
        Command::Retrieve(a) => {
            if a.retriever != Retriever::Bm25 && a.first.model.is_none() {
                bail!("--retriever {} needs --model", a.retriever);
            }
            let (_, index) = load_first_stage(&a.first, a.lambda, &ctx.tokenizer)?;
            let queries = load_queries(&a.queries)?;
            let lists: Vec<CandidateList> = queries
                .iter()
                .map(|q| match a.retriever {
                    Retriever::Bm25 => index.bm25.retrieve(q, a.depth),
                    Retriever::De => index.dense.search(&q.id, &index.query_dense(q), a.depth),
                    Retriever::Hybrid => index.retrieve(q, a.depth),
                })
                .collect();
            let run = RunFile::from_lists(a.retriever.name(), lists);
            let out = ctx.out(&a.out)?;
            run.write(&out)?;
            println!("retrieved {} queries into {}", run.len(), out.display());
        }
        Command::GenTrain(a) => {
            let base = match a.window {
                WindowArg::Supervised => SamplingWindow::supervised(),
                WindowArg::ZeroShot => SamplingWindow::zero_shot(),
            };
            let window = SamplingWindow {
                skip: a.skip.unwrap_or(base.skip),
                depth: a.depth.unwrap_or(base.depth),
                n_negatives: a.negatives.unwrap_or(base.n_negatives),
            };
            let run = RunFile::read(&a.run)?;
            let (lists, report) = build_candidate_lists(&run, &load_qrels(&a.qrels)?, window, ctx.seed)?;
            write_candidate_lists(ctx.out(&a.out)?, &lists)?;
            println!(
                "built {} lists ({} short, {} dropped without a positive)",
                report.lists,
                report.short.len(),
                report.dropped.len()
            );
        }
        Command::Mix(a) => {
            let mixed = mix_training_data(&read_candidate_lists(&a.a)?, &read_candidate_lists(&a.b)?, ctx.seed);
            write_candidate_lists(ctx.out(&a.out)?, &mixed)?;
            println!("mixed {} lists", mixed.len());
        }
        Command::TrainReranker(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let queries = load_queries(&a.queries)?;
            let lists = read_candidate_lists(&a.lists)?;
            let config = RerankerTrainConfig {
                steps: a.steps,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                seed: ctx.seed,
                dim: a.dim,
                max_grad_norm: a.max_grad_norm,
            };
            let init = a.init.as_ref().map(RerankerParams::load).transpose()?;
            let trained = train_reranker(&lists, &queries, &corpus, &ctx.tokenizer, &config, init)?;
            let out = ctx.out(&a.out)?;
            trained.params.save(&out)?;
            let l = &trained.step_losses;
            if !l.is_empty() {
                let w = l.len().min(50);
                let head = l[..w].iter().sum::<f64>() / w as f64;
                let tail = l[l.len() - w..].iter().sum::<f64>() / w as f64;
                println!("trained {} steps, mean loss {head:.4} -> {tail:.4}; saved {}", l.len(), out.display());
            }
        }
        Command::Rerank(a) => {
            let params = RerankerParams::load(&a.model)?;
            let run = RunFile::read(&a.run)?;
            let out_run = rerank(
                &params,
                &run,
                &load_queries(&a.queries)?,
                &load_corpus(&a.corpus)?,
                &ctx.tokenizer,
                a.top_k,
                &a.tag,
            )?;
            let out = ctx.out(&a.out)?;
            out_run.write(&out)?;
            println!("reranked {} queries into {}", out_run.len(), out.display());
        }
        Command::Eval(a) => {
            let run = RunFile::read(&a.run)?;
            let qrels = load_qrels(&a.qrels)?;
            let ids: Vec<String> = match &a.queries {
                Some(q) => load_queries(q)?.into_iter().map(|q| q.id).collect(),
                None => run.rankings.keys().cloned().collect(),
            };
            let mut reports = Vec::new();
            for m in &a.metrics {
                let metric: Metric = m.parse()?;
                reports.push(evaluate_queries(&run, &qrels, metric, ids.iter().map(String::as_str))?);
            }
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| vec![r.metric.clone(), format!("{:.4}", r.mean), r.per_query.len().to_string()])
                .collect();
            print!("{}", format_table(&["metric".into(), "mean".into(), "queries".into()], &rows));
            if let Some(j) = &a.json {
                write_json(&ctx.out(j)?, &reports)?;
            }
        }
        Command::Run => {
            let config = load_config(&cli)?;
            let report = run_experiment(&config)?;
            let show = |name: &str, m: hybrid_rerank::experiment::MetricSet| {
                vec![
                    name.to_string(),
                    format!("{:.4}", m.mrr_10),
                    format!("{:.4}", m.ndcg_10),
                    format!("{:.4}", m.recall_100),
                ]
            };
            let mut rows = vec![show(config.eval_retriever.name(), report.first_stage)];
            if let Some(r) = report.reranked {
                rows.push(show("reranked", r));
            }
            print!(
                "{}",
                format_table(&["run".into(), "MRR@10".into(), "nDCG@10".into(), "R@100".into()], &rows)
            );
            println!("λ = {}; artifacts in {}", report.lambda, config.workdir.display());
        }
        Command::Ablate => {
            let config = load_config(&cli)?;
            let report = ablation_matrix(&config)?;
            print!("{}", report.to_table());
            println!("λ = {}; artifacts in {}", report.lambda, config.workdir.display());
        }
    }
    Ok(())
}
