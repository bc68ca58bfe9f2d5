use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setvec::cli::RunManifest;

const TINY_TRAIN: &[&str] = &[
    "--epochs",
    "2",
    "--dim",
    "8",
    "--channels",
    "4,8",
    "--convs-per-stage",
    "1",
    "--k",
    "3",
    "--batch-size",
    "8",
];

fn setvec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setvec"))
        .args(args)
        .env_remove("SETVEC_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_corpus(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "gen-corpus",
        "--out",
        p(dir),
        "--styles",
        "2",
        "--items-per-style",
        "4",
        "--categories",
        "top,bottom",
        "--image-size",
        "8",
        "--sets",
        "40",
        "--set-size-weights",
        "1,0,0",
        "--labeled-sets",
        "60",
        "--questions",
        "10",
    ];
    args.extend_from_slice(extra);
    setvec(&args)
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with(".manifest.json") {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(tiny_corpus(&a, &[]).status.code(), Some(0));
    assert_eq!(tiny_corpus(&b, &[]).status.code(), Some(0));
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert!(ta.contains_key(Path::new("items.tsv")));
    assert!(ta.contains_key(Path::new("analogy_suite.json")));
    assert_eq!(ta, tb);
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(a.join("gen-corpus.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.subcommand, "gen-corpus");
    assert_eq!(manifest.seed, Some(7));
    assert_eq!(manifest.config["spec"]["n_sets"], 40);
}

#[test]
fn gen_corpus_without_out_is_a_usage_error() {
    let out = setvec(&["gen-corpus", "--sets", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn gen_corpus_with_zero_sets_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    let out = tiny_corpus(&dir, &["--sets", "0"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read_to_string(dir.join("sets.tsv"))
            .unwrap()
            .lines()
            .count(),
        0
    );
    assert!(!dir.join("analogy_suite.json").exists());
}

#[test]
fn invalid_spec_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tiny_corpus(&tmp.path().join("c"), &["--set-size-weights", "0,1,0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_embed_query_project_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    let run = tmp.path().join("run");
    assert_eq!(tiny_corpus(&corpus, &[]).status.code(), Some(0));

    let mut args = vec!["train", "--corpus", p(&corpus), "--out", p(&run)];
    args.extend_from_slice(TINY_TRAIN);
    let out = setvec(&args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ck = run.join("checkpoint.sv2c");
    assert!(ck.exists());
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,epoch,loss"));
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(run.join("train.manifest.json").exists());

    let matrix = tmp.path().join("m.tsv");
    let out = setvec(&[
        "embed",
        "--corpus",
        p(&corpus),
        "--checkpoint",
        p(&ck),
        "--out",
        p(&matrix),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let tsv = fs::read_to_string(&matrix).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 16);
    assert_eq!(tsv.lines().next().unwrap().split('\t').count(), 2 + 8);

    let item = tsv
        .lines()
        .nth(5)
        .unwrap()
        .split('\t')
        .next()
        .unwrap()
        .to_string();
    let out = setvec(&[
        "query",
        "--matrix",
        p(&matrix),
        "--item",
        &item,
        "--top",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let first = stdout.lines().nth(1).unwrap();
    assert!(first.starts_with(&format!("1\t{item}\t")), "{stdout}");
    assert_eq!(stdout.lines().count(), 1 + 5);

    let proj = tmp.path().join("p.tsv");
    let out = setvec(&["project", "--matrix", p(&matrix), "--out", p(&proj)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&proj).unwrap().lines().count(), 1 + 16);

    // Replaying the embed manifest rewrites a bit-identical matrix.
    let before = fs::read(&matrix).unwrap();
    fs::remove_file(&matrix).unwrap();
    let out = setvec(&[
        "replay",
        "--manifest",
        p(&tmp.path().join("embed.manifest.json")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&matrix).unwrap(), before);
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    let run = tmp.path().join("run");
    assert_eq!(tiny_corpus(&corpus, &[]).status.code(), Some(0));
    let mut args = vec!["train", "--corpus", p(&corpus), "--out", p(&run)];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(&["--epochs", "0"]);
    let out = setvec(&args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ck = setvec::trainer::load_checkpoint(&run.join("checkpoint.sv2c")).unwrap();
    assert_eq!(ck.step, 0);
    let init = setvec::trainer::Checkpoint::init(&ck.config).unwrap();
    assert_eq!(ck.input.tensors(), init.input.tensors());
    assert_eq!(ck.context.tensors(), init.context.tensors());
    assert!(!run.join("loss.csv").exists());
}

#[test]
fn k_exceeding_the_pool_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    assert_eq!(tiny_corpus(&corpus, &[]).status.code(), Some(0));
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--corpus", p(&corpus), "--out", p(&run)];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(&["--k", "100"]);
    let out = setvec(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient item pool"));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = setvec(&[
        "project",
        "--matrix",
        p(&tmp.path().join("none.tsv")),
        "--out",
        p(&tmp.path().join("p.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn oracle_embeddings_answer_every_analogy() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    assert_eq!(tiny_corpus(&corpus, &[]).status.code(), Some(0));
    let matrix = tmp.path().join("oracle.tsv");
    let out = setvec(&[
        "embed",
        "--corpus",
        p(&corpus),
        "--oracle",
        "color",
        "--out",
        p(&matrix),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rep = tmp.path().join("analogy.json");
    let suite = corpus.join("analogy_suite.json");
    let out = setvec(&[
        "analogy",
        "--suite",
        p(&suite),
        "--matrix",
        p(&matrix),
        "--report",
        p(&rep),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(&rep);
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["n_questions"], 10);
    assert_eq!(r["n_failed_category"], 0);
    assert_eq!(r["per_question"].as_array().unwrap().len(), 10);
}

#[test]
fn classify_oracle_styles_and_shuffled_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    assert_eq!(tiny_corpus(&corpus, &[]).status.code(), Some(0));
    let matrix = tmp.path().join("oracle.tsv");
    assert_eq!(
        setvec(&[
            "embed",
            "--corpus",
            p(&corpus),
            "--oracle",
            "style",
            "--out",
            p(&matrix)
        ])
        .status
        .code(),
        Some(0)
    );
    let rep = tmp.path().join("classify.json");
    let out = setvec(&[
        "classify",
        "--matrix",
        p(&matrix),
        "--corpus",
        p(&corpus),
        "--report",
        p(&rep),
        "--mlp-epochs",
        "100",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(&rep);
    assert_eq!(r["accuracy"], 1.0);
    assert_eq!(r["shuffled_labels"], false);

    let out = setvec(&[
        "classify",
        "--matrix",
        p(&matrix),
        "--corpus",
        p(&corpus),
        "--report",
        p(&rep),
        "--mlp-epochs",
        "100",
        "--shuffle-labels",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&rep)["shuffled_labels"], true);
}

#[test]
fn ablation_on_a_pair_only_corpus_has_zero_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    assert_eq!(tiny_corpus(&corpus, &[]).status.code(), Some(0));
    let rep = tmp.path().join("ablate.json");
    let mut args = vec![
        "ablate",
        "--corpus",
        p(&corpus),
        "--report",
        p(&rep),
        "--mlp-epochs",
        "50",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = setvec(&args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(&rep);
    assert_eq!(r["delta"], 0.0);
    assert_eq!(r["set_acc"], r["pair_acc"]);
}

#[test]
fn zero_threads_is_rejected() {
    let out = setvec(&["--threads", "0", "gen-corpus", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(2));
}
