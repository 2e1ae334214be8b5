use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "synth": {"n_entities": 200, "n_relations": 4, "n_values": 60, "n_adapt": 120, "n_train": 60, "n_eval": 20, "n_distractors": 20},
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 64},
  "adapt": {"steps": 20, "batch_size": 4, "learning_rate": 0.001},
  "finetune": {"steps": 20, "batch_size": 4, "learning_rate": 0.001, "temperature": 0.05, "normalize": true},
  "distill": {"steps": 10},
  "top_k": 10
}"#;

fn ebadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebadapt"))
        .current_dir(dir)
        .args(["--config", "config.json", "--threads", "1"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ebadapt(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const TOK: &str = "tok/tokenizer.json";

fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("config.json"), CONFIG).unwrap();
    ok(p, &["gen-corpus", "--out", "data"]);
    ok(p, &["build-tokenizer", "--corpus", "data", "--out", "tok"]);
    ok(p, &["adapt", "--corpus", "data", "--tokenizer", TOK, "--out", "adapted"]);
    ok(p, &["finetune", "--corpus", "data", "--tokenizer", TOK, "--checkpoint", "adapted/model.ckpt", "--out", "ft"]);
    dir
}

#[test]
fn full_pipeline_and_reports() {
    let dir = trained();
    let p = dir.path();
    for f in ["adapted/initial.ckpt", "adapted/loss.csv", "ft/model.ckpt", "ft/loss.csv", "ft/pairs.jsonl", "ft/manifest.json"] {
        assert!(p.join(f).exists(), "{f} missing");
    }
    let curve = std::fs::read_to_string(p.join("adapted/loss.csv")).unwrap();
    assert!(curve.starts_with("step,ebae_loss,ebar_loss"));

    let ck = ["--tokenizer", TOK, "--checkpoint", "ft/model.ckpt"];
    ok(p, &[&["embed"][..], &ck, &["--docs", "data/docs.jsonl", "--out", "index"]].concat());
    ok(p, &[&["search"][..], &ck, &["--index", "index/index.bin", "--queries", "data/queries.jsonl", "--out", "run"]].concat());
    let printed = ok(p, &["eval", "--run", "run/run.trec", "--qrels", "data/qrels.tsv", "--out", "eval"]);
    let saved = std::fs::read_to_string(p.join("eval/metrics.txt")).unwrap();
    assert!(printed.contains(saved.lines().next().unwrap()));
    assert!(saved.contains("queries=20"));

    ok(p, &[&["compress", "--corpus", "data"][..], &ck, &["--sparse-n", "4", "--out", "sp"]].concat());
    ok(p, &[&["embed"][..], &ck, &["--docs", "data/docs.jsonl", "--compression", "sp/compression.json", "--out", "sp"]].concat());
    ok(p, &[&["search"][..], &ck, &["--index", "sp/index.bin", "--queries", "data/queries.jsonl", "--out", "sp"]].concat());
    let run = std::fs::read_to_string(p.join("sp/run.trec")).unwrap();
    assert_eq!(run.lines().next().unwrap().split_whitespace().count(), 6);

    let table = ok(
        p,
        &[
            "diagnose-lexical", "--corpus", "data", "--tokenizer", TOK, "--initial", "adapted/initial.ckpt", "--adapted",
            "adapted/model.ckpt", "--finetuned", "ft/model.ckpt", "--out", "lex",
        ],
    );
    assert!(table.contains("mean BM25"));
    let csv = std::fs::read_to_string(p.join("lex/lexical.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    ok(p, &[&["report", "--corpus", "data"][..], &ck, &["--out", "report"]].concat());
    let report = std::fs::read_to_string(p.join("report/compression.csv")).unwrap();
    assert!(report.starts_with("budget,"));
    assert_eq!(report.lines().count(), 5);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = trained();
    let p = dir.path();
    let ck = ["--tokenizer", TOK, "--checkpoint", "ft/model.ckpt"];
    ok(p, &[&["embed"][..], &ck, &["--docs", "data/docs.jsonl", "--out", "index"]].concat());

    let search = |checkpoint: &str, extra: &[&str]| {
        let base = ["search", "--tokenizer", TOK, "--checkpoint", checkpoint, "--index", "index/index.bin", "--queries", "data/queries.jsonl", "--out", "run"];
        ebadapt(p, &[&base[..], extra].concat())
    };
    let mismatch = search("ft/model.ckpt", &["--scheme", "s2s"]);
    assert_eq!(code(&mismatch), 1);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("index/index.bin"));
    assert_eq!(code(&search("adapted/model.ckpt", &[])), 2);
    assert_eq!(code(&search("missing.ckpt", &[])), 2);
    assert_eq!(code(&search("ft/model.ckpt", &["--top-k", "0"])), 1);

    std::fs::write(p.join("bad.ckpt"), b"EBADCKPT-truncated").unwrap();
    assert_eq!(code(&search("bad.ckpt", &[])), 2);

    assert_eq!(code(&ebadapt(p, &["eval", "--bogus"])), 1);
    assert_eq!(code(&ebadapt(p, &["--help"])), 0);
    assert_eq!(code(&ebadapt(p, &["--threads", "0", "gen-corpus", "--out", "x"])), 1);
}

#[test]
fn zero_step_adaptation_reproduces_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("config.json"), CONFIG).unwrap();
    ok(p, &["gen-corpus", "--out", "data"]);
    ok(p, &["build-tokenizer", "--corpus", "data", "--out", "tok"]);
    ok(p, &["adapt", "--corpus", "data", "--tokenizer", TOK, "--steps", "0", "--out", "a"]);
    let init = std::fs::read(p.join("a/initial.ckpt")).unwrap();
    assert_eq!(init, std::fs::read(p.join("a/model.ckpt")).unwrap());
    ok(p, &["adapt", "--corpus", "data", "--tokenizer", TOK, "--checkpoint", "a/model.ckpt", "--steps", "0", "--out", "b"]);
    assert_eq!(init, std::fs::read(p.join("b/model.ckpt")).unwrap());
}
