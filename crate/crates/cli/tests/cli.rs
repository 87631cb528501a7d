use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [1, 2]

[encoder]
vocab_size = 512
d_emb = 8
d_model = 8

[detector.meta]
max_steps = 20
eval_every = 10
meta_lr = 0.01
[detector.finetune]
steps = 3

[typer.meta]
max_steps = 20
eval_every = 10
meta_lr = 0.01
[typer.finetune]
steps = 3
"#;

fn metaner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaner"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Path as an argument string; leaked so temporaries can sit in argument arrays.
fn p(path: impl AsRef<Path>) -> &'static str {
    Box::leak(path.as_ref().to_str().unwrap().to_owned().into_boxed_str())
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("run.toml"), SMALL).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn sample(&self, name: &str, types: &str, first_doc: &str, n: &str, split: &str) {
        let out = metaner(&[
            "sample",
            "--synthetic",
            "--types",
            types,
            "--first-doc",
            first_doc,
            "--episodes",
            n,
            "--n-way",
            "2",
            "--query-shots",
            "2",
            "--split",
            split,
            "--out",
            p(self.path(name)),
        ]);
        assert_eq!(code(&out), 0, "{out:?}");
    }

    fn with_data() -> Self {
        let ws = Workspace::new();
        ws.sample("train.jsonl", "0..4", "0", "20", "train");
        ws.sample("dev.jsonl", "0..4", "1000", "4", "dev");
        ws.sample("test.jsonl", "8..10", "2000", "6", "test");
        ws
    }

    fn train(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            sub,
            "--config",
            p(self.root.join("run.toml")),
            "--train",
            p(self.root.join("train.jsonl")),
            "--dev",
            p(self.root.join("dev.jsonl")),
        ];
        args.extend_from_slice(extra);
        metaner(&args)
    }
}

fn trained(ws: &Workspace, out: &str) -> (PathBuf, PathBuf) {
    let dir = ws.path(out);
    assert_eq!(code(&ws.train("train-span", &["--out", p(&dir)])), 0);
    assert_eq!(code(&ws.train("train-typing", &["--out", p(&dir)])), 0);
    (dir.join("detector.ckpt.json"), dir.join("typer.ckpt.json"))
}

#[test]
fn sample_synthetic_writes_loadable_episodes() {
    let ws = Workspace::new();
    ws.sample("eps.jsonl", "8..12", "50", "3", "test");
    let set = metaner::load_episodes(ws.path("eps.jsonl"), &metaner::LoadOptions::default()).unwrap();
    assert_eq!(set.len(), 3);
    assert_eq!(set.split_tag, metaner::SplitTag::Test);
    for ep in &set.episodes {
        assert_eq!(ep.n_way(), 2);
    }
}

#[test]
fn sample_from_corpus_file() {
    let ws = Workspace::new();
    let mut corpus = String::new();
    for i in 0..6 {
        corpus.push_str(&format!("Ann{i}\tper\nvisited\tO\nOslo{i}\tloc\n\n"));
    }
    fs::write(ws.path("corpus.txt"), corpus).unwrap();
    let out_file = ws.path("eps.jsonl");
    let out = metaner(&[
        "sample",
        "--corpus",
        p(ws.path("corpus.txt")),
        "--n-way",
        "2",
        "--episodes",
        "2",
        "--out",
        p(&out_file),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let set = metaner::load_episodes(&out_file, &metaner::LoadOptions::default()).unwrap();
    assert_eq!(set.len(), 2);
}

#[test]
fn sample_capacity_failure_is_data_error() {
    let ws = Workspace::new();
    fs::write(ws.path("corpus.txt"), "Ann\tper\n").unwrap();
    let out = metaner(&[
        "sample",
        "--corpus",
        p(ws.path("corpus.txt")),
        "--n-way",
        "3",
        "--out",
        p(ws.path("x")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_and_eval_end_to_end() {
    let ws = Workspace::with_data();
    let (det, typ) = trained(&ws, "models");
    assert!(ws.path("models/detector.metrics.jsonl").exists());
    let report_dir = ws.path("report");
    let out = metaner(&[
        "eval",
        "--config",
        p(ws.path("run.toml")),
        "--detector",
        p(&det),
        "--typer",
        p(&typ),
        "--test",
        p(ws.path("test.jsonl")),
        "--out",
        p(&report_dir),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("seed 1:") && text.contains("seed 2:"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 6);
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 2);
    let predictions = fs::read_to_string(report_dir.join("predictions.jsonl")).unwrap();
    assert!(predictions.lines().count() >= 2 * 6);
}

#[test]
fn training_is_reproducible_across_invocations() {
    let ws = Workspace::with_data();
    let (a, _) = trained(&ws, "a");
    let (b, _) = trained(&ws, "b");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn ablation_flags_change_training() {
    let ws = Workspace::with_data();
    let plain = ws.path("plain");
    let conv = ws.path("conv");
    assert_eq!(code(&ws.train("train-span", &["--out", p(&plain)])), 0);
    assert_eq!(
        code(&ws.train(
            "train-span",
            &["--out", p(&conv), "--conventional", "--lambda-train", "0"]
        )),
        0
    );
    assert_ne!(
        fs::read(plain.join("detector.ckpt.json")).unwrap(),
        fs::read(conv.join("detector.ckpt.json")).unwrap()
    );
}

#[test]
fn empty_test_set_exits_with_data_error() {
    let ws = Workspace::with_data();
    let (det, typ) = trained(&ws, "models");
    fs::write(ws.path("empty.jsonl"), "").unwrap();
    let out = metaner(&[
        "eval",
        "--config",
        p(ws.path("run.toml")),
        "--detector",
        p(&det),
        "--typer",
        p(&typ),
        "--test",
        p(ws.path("empty.jsonl")),
    ]);
    assert_eq!(code(&out), 2, "{out:?}");
}

#[test]
fn checkpoint_config_mismatch_is_config_error() {
    let ws = Workspace::with_data();
    let (det, typ) = trained(&ws, "models");
    fs::write(ws.path("wide.toml"), SMALL.replace("d_model = 8", "d_model = 16")).unwrap();
    let out = metaner(&[
        "eval",
        "--config",
        p(ws.path("wide.toml")),
        "--detector",
        p(&det),
        "--typer",
        p(&typ),
        "--test",
        p(ws.path("test.jsonl")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_model"));
}

#[test]
fn config_errors_exit_with_one() {
    let ws = Workspace::with_data();
    fs::write(ws.path("bad.toml"), "seeds = [1]\nunknown_key = 3\n").unwrap();
    let out = metaner(&[
        "train-span",
        "--config",
        p(ws.path("bad.toml")),
        "--out",
        p(ws.path("o")),
    ]);
    assert_eq!(code(&out), 1);
    let out = ws.train("train-span", &["--out", p(ws.path("o")), "--lambda-train", "-1"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&metaner(&["train-span", "--no-such-flag"])), 1);
    assert_eq!(code(&metaner(&["--help"])), 0);
}

#[test]
fn missing_or_malformed_data_exits_with_two() {
    let ws = Workspace::with_data();
    let out = metaner(&[
        "train-span",
        "--train",
        p(ws.path("absent.jsonl")),
        "--out",
        p(ws.path("o")),
    ]);
    assert_eq!(code(&out), 2);
    fs::write(
        ws.path("broken.jsonl"),
        "{\"format_version\":1,\"split_tag\":\"train\"}\nnot json\n",
    )
    .unwrap();
    let out = metaner(&[
        "train-span",
        "--config",
        p(ws.path("run.toml")),
        "--train",
        p(ws.path("broken.jsonl")),
        "--out",
        p(ws.path("o")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn diverging_training_exits_with_three() {
    let ws = Workspace::with_data();
    let toml = SMALL.replacen(
        "meta_lr = 0.01",
        "meta_lr = 1e300\nmeta_optimizer = \"sgd\"\nclip_norm = 0.0",
        1,
    );
    fs::write(ws.path("hot.toml"), toml).unwrap();
    let out = metaner(&[
        "train-span",
        "--config",
        p(ws.path("hot.toml")),
        "--train",
        p(ws.path("train.jsonl")),
        "--out",
        p(ws.path("o")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dump_embeddings_writes_one_line_per_gold_span() {
    let ws = Workspace::with_data();
    let (_, typ) = trained(&ws, "models");
    let dump = ws.path("vectors.tsv");
    let out = metaner(&[
        "dump-embeddings",
        "--config",
        p(ws.path("run.toml")),
        "--typer",
        p(&typ),
        "--episodes",
        p(ws.path("test.jsonl")),
        "--finetune-steps",
        "0",
        "--out",
        p(&dump),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let set = metaner::load_episodes(ws.path("test.jsonl"), &metaner::LoadOptions::default()).unwrap();
    let gold: usize = set
        .episodes
        .iter()
        .flat_map(|e| e.support.iter().chain(&e.query))
        .map(|s| s.spans.len())
        .sum();
    let text = fs::read_to_string(dump).unwrap();
    assert_eq!(text.lines().count(), gold);
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 7 + 8);
    }
}
