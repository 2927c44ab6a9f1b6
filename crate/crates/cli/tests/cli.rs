use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-rerank"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn make_data(dir: &Path) {
    ok(
        dir,
        &[
            "make-synth", "--out", "data", "--passages", "300", "--train-queries", "60", "--test-queries", "30", "--seed", "2",
        ],
    );
}

#[test]
fn step_by_step_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_data(d);
    ok(d, &["index", "--corpus", "data/corpus.jsonl", "--out", "bm25.json", "--preset", "beir-anserini"]);
    let trained = ok(
        d,
        &[
            "train-de", "--corpus", "data/corpus.jsonl", "--queries", "data/train_queries.tsv", "--qrels",
            "data/qrels.txt", "--out", "de.bin", "--epochs", "5", "--dim", "16",
        ],
    );
    assert!(trained.contains("loss"), "{trained}");
    ok(d, &["qgen", "--corpus", "data/corpus.jsonl", "--out", "pairs.tsv", "--max-per-passage", "2"]);
    let filtered = ok(
        d,
        &[
            "filter", "--corpus", "data/corpus.jsonl", "--pairs", "pairs.tsv", "--model", "de.bin", "--out", "kept.tsv",
            "--report", "filter.json",
        ],
    );
    assert!(filtered.starts_with("kept "), "{filtered}");
    let tuned = ok(
        d,
        &[
            "tune-lambda", "--corpus", "data/corpus.jsonl", "--bm25", "bm25.json", "--model", "de.bin", "--queries",
            "data/train_queries.tsv", "--qrels", "data/qrels.txt", "--grid", "0,1,5", "--out", "lambda.json",
        ],
    );
    assert!(tuned.contains("best λ"), "{tuned}");
    for (r, out) in [("bm25", "bm25.train.trec"), ("hybrid", "hybrid.train.trec")] {
        ok(
            d,
            &[
                "retrieve", "--corpus", "data/corpus.jsonl", "--bm25", "bm25.json", "--model", "de.bin", "--retriever", r,
                "--queries", "data/train_queries.tsv", "--lambda", "2", "--out", out,
            ],
        );
    }
    ok(
        d,
        &[
            "retrieve", "--corpus", "data/corpus.jsonl", "--bm25", "bm25.json", "--retriever", "bm25", "--queries",
            "data/test_queries.tsv", "--out", "bm25.test.trec",
        ],
    );
    for (run, out) in [("bm25.train.trec", "lists.bm25.jsonl"), ("hybrid.train.trec", "lists.hybrid.jsonl")] {
        ok(
            d,
            &[
                "gen-train", "--run", run, "--qrels", "data/qrels.txt", "--out", out, "--depth", "40", "--negatives", "7",
            ],
        );
    }
    ok(d, &["mix", "--a", "lists.bm25.jsonl", "--b", "lists.hybrid.jsonl", "--out", "lists.mixed.jsonl"]);
    let rr = ok(
        d,
        &[
            "train-reranker", "--corpus", "data/corpus.jsonl", "--queries", "data/train_queries.tsv", "--lists",
            "lists.mixed.jsonl", "--out", "rr.bin", "--steps", "40", "--dim", "8", "--lr", "0.1", "--max-grad-norm", "5",
        ],
    );
    assert!(rr.contains("trained 40 steps"), "{rr}");
    ok(
        d,
        &[
            "rerank", "--model", "rr.bin", "--run", "bm25.test.trec", "--corpus", "data/corpus.jsonl", "--queries",
            "data/test_queries.tsv", "--top-k", "20", "--out", "reranked.trec",
        ],
    );
    let eval = ok(d, &["eval", "--run", "reranked.trec", "--qrels", "data/qrels.txt", "--json", "eval.json"]);
    assert!(eval.contains("mrr@10") && eval.contains("recall@100"), "{eval}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);
    assert_eq!(report[0]["per_query"].as_object().unwrap().len(), 30);
}

#[test]
fn run_from_config_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_data(d);
    ok(d, &["init-config", "--data", "data", "--out", "config.json", "--workdir", "work"]);
    let mut config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("config.json")).unwrap()).unwrap();
    config["de"]["epochs"] = 5.into();
    config["qgen"]["de0"]["epochs"] = 2.into();
    config["qgen"]["de1_epochs"] = 1.into();
    config["reranker"]["steps"] = 30.into();
    config["reranker"]["dim"] = 8.into();
    std::fs::write(d.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let first = ok(d, &["--config", "config.json", "run"]);
    assert!(first.contains("reranked"), "{first}");
    let manifest = std::fs::read(d.join("work/manifest.json")).unwrap();
    let second = ok(d, &["--config", "config.json", "run"]);
    assert_eq!(first, second);
    assert_eq!(manifest, std::fs::read(d.join("work/manifest.json")).unwrap());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(tmp.path(), &["index", "--corpus", "missing.jsonl", "--out", "bm25.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("missing.jsonl"), "{err}");

    let out = cli(tmp.path(), &["run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let out = cli(tmp.path(), &["index", "--corpus", "x", "--out", "y", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}
