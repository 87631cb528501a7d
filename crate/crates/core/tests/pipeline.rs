mod common;

use std::fs;

use common::{seq, small_run_config, write_synthetic_data};
use metaner::checkpoint::{load_model, save_model};
use metaner::params::ParamSet;
use metaner::pipeline::{
    detector_dev_f1, dump_embeddings, eval_command, evaluate_models, run_episode, run_episodes, train_span_command,
    train_typer, train_typing_command, typer_dev_f1, typing_task, vocab_for,
};
use metaner::synthetic::{document_episodes, SyntheticConfig};
use metaner::{
    DetectorParams, Episode, EpisodeSet, EpisodeShape, Error, HashVocab, OptimizerKind, SplitTag, TypedSpan,
    TyperParams,
};

fn models(cfg: &metaner::RunConfig) -> (DetectorParams, TyperParams) {
    (
        DetectorParams::init(cfg.encoder, 3).unwrap(),
        TyperParams::init(cfg.encoder, 4).unwrap(),
    )
}

fn episode() -> Episode {
    Episode {
        support: vec![
            seq("mr jack gordon is an actor", &[(1, 2, "person")]),
            seq("she flew to paris today", &[(3, 3, "city")]),
        ],
        query: vec![
            seq("mr kurland is an actor", &[(1, 1, "person")]),
            seq("he flew to rome today", &[(3, 3, "city")]),
            seq("nothing to see", &[]),
        ],
        types: vec!["person".into(), "city".into()],
    }
}

#[test]
fn meta_parameters_survive_episode_runs() {
    let cfg = small_run_config();
    let (det, typ) = models(&cfg);
    let (det0, typ0) = (det.clone(), typ.clone());
    run_episode(&det, &typ, &episode(), 0, &cfg, 1).unwrap();
    assert!(det.bitwise_eq(&det0));
    assert!(typ.bitwise_eq(&typ0));
}

#[test]
fn nothing_detected_gives_empty_predictions() {
    let mut cfg = small_run_config();
    cfg.detector.finetune.steps = 0;
    let (mut det, typ) = models(&cfg);
    det.head_weight.data.fill(0.0);
    det.head_bias.data = vec![20.0, 0.0, 0.0, 0.0, 0.0];
    let ep = episode();
    let records = run_episode(&det, &typ, &ep, 7, &cfg, 1).unwrap();
    assert_eq!(records.len(), ep.query.len());
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.episode_id, 7);
        assert_eq!(r.sentence_id, i);
        assert!(r.predicted.is_empty());
        assert_eq!(r.gold, ep.query[i].spans);
    }
}

#[test]
fn zero_finetune_is_meta_model_inference() {
    let mut cfg = small_run_config();
    cfg.detector.finetune.steps = 0;
    cfg.typer.finetune.steps = 0;
    let (mut det, typ) = models(&cfg);
    // Bias towards single-token spans so something gets typed.
    det.head_bias.data = vec![0.0, 0.0, 0.0, 0.0, 0.5];
    let ep = episode();
    let records = run_episode(&det, &typ, &ep, 0, &cfg, 1).unwrap();
    let vocab = vocab_for(&cfg);
    let task = typing_task(&cfg);
    let protos = task.compute_prototypes(&typ, &ep.support, &ep.types).unwrap();
    let mut typed_any = false;
    for (q, r) in ep.query.iter().zip(&records) {
        let spans = det.detect_spans(&vocab.ids(&q.tokens)).unwrap();
        let expected: Vec<TypedSpan> = task
            .classify_spans(&typ, &protos, &q.tokens, &spans)
            .unwrap()
            .into_iter()
            .map(|d| TypedSpan::new(d.span.start, d.span.end, d.predicted_type))
            .collect();
        typed_any |= !expected.is_empty();
        assert_eq!(r.predicted, expected);
    }
    assert!(typed_any);
}

#[test]
fn memorizable_episode_is_recovered_after_finetuning() {
    let mut cfg = small_run_config();
    cfg.encoder.dropout = 0.0;
    cfg.encoder.d_model = 16;
    cfg.encoder.d_emb = 16;
    for f in [&mut cfg.detector.finetune, &mut cfg.typer.finetune] {
        f.steps = 200;
        f.lr = 0.05;
        f.optimizer = OptimizerKind::Adamw;
        f.warmup_fraction = 0.0;
    }
    let mut ep = episode();
    ep.query = ep.support.clone();
    let (det, typ) = models(&cfg);
    let records = run_episode(&det, &typ, &ep, 0, &cfg, 1).unwrap();
    for r in &records {
        assert_eq!(r.predicted, r.gold);
    }
}

#[test]
fn empty_test_set_gives_empty_report() {
    let cfg = small_run_config();
    let (det, typ) = models(&cfg);
    let (report, dumps) = evaluate_models(&det, &typ, &EpisodeSet::new(SplitTag::Test), &cfg).unwrap();
    assert!(report.is_empty());
    assert!(report.per_seed.is_empty());
    assert!(dumps.is_empty());
}

#[test]
fn single_seed_reports_zero_std() {
    let mut cfg = small_run_config();
    cfg.seeds = vec![9];
    let (det, typ) = models(&cfg);
    let mut set = EpisodeSet::new(SplitTag::Test);
    set.episodes = vec![episode(), episode()];
    let (report, _) = evaluate_models(&det, &typ, &set, &cfg).unwrap();
    assert_eq!(report.per_seed.len(), 1);
    assert_eq!(report.f1_std, 0.0);
    assert_eq!(report.span_f1_std, 0.0);
    assert_eq!(report.f1_mean, report.per_seed[0].end_to_end.f1);
}

#[test]
fn evaluation_ignores_thread_count() {
    let mut cfg = small_run_config();
    let (det, typ) = models(&cfg);
    let mut set = EpisodeSet::new(SplitTag::Test);
    set.episodes = (0..6).map(|_| episode()).collect();
    let sequential = run_episodes(&det, &typ, &set, &cfg, 5).unwrap();
    cfg.threads = 4;
    let parallel = run_episodes(&det, &typ, &set, &cfg, 5).unwrap();
    assert_eq!(sequential, parallel);
    let (a, _) = evaluate_models(&det, &typ, &set, &cfg).unwrap();
    let (b, _) = evaluate_models(&det, &typ, &set, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_step_training_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config();
    write_synthetic_data(dir.path(), &mut cfg, 1);
    cfg.detector.meta.max_steps = 0;
    cfg.typer.meta.max_steps = 0;
    let det = train_span_command(&cfg, dir.path()).unwrap();
    let typ = train_typing_command(&cfg, dir.path()).unwrap();
    let (d, _): (DetectorParams, HashVocab) = load_model(&det.checkpoint).unwrap();
    let (t, _): (TyperParams, HashVocab) = load_model(&typ.checkpoint).unwrap();
    assert!(d.bitwise_eq(&DetectorParams::init(cfg.encoder, cfg.detector.meta.seed).unwrap()));
    assert!(t.bitwise_eq(&TyperParams::init(cfg.encoder, cfg.typer.meta.seed ^ 0x5555_5555_5555_5555).unwrap()));
    assert_eq!(fs::read_to_string(&det.metrics_log).unwrap(), "");
}

#[test]
fn training_is_reproducible_and_stages_are_separate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config();
    write_synthetic_data(dir.path(), &mut cfg, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = train_span_command(&cfg, &a).unwrap();
    let second = train_span_command(&cfg, &b).unwrap();
    assert_eq!(
        fs::read(&first.checkpoint).unwrap(),
        fs::read(&second.checkpoint).unwrap()
    );
    assert_eq!(
        fs::read(&first.metrics_log).unwrap(),
        fs::read(&second.metrics_log).unwrap()
    );
    assert_eq!(fs::read_to_string(&first.metrics_log).unwrap().lines().count(), 2);
    let typer = train_typing_command(&cfg, &a).unwrap();
    assert_ne!(typer.checkpoint, first.checkpoint);
    let (d, _): (DetectorParams, HashVocab) = load_model(&first.checkpoint).unwrap();
    let (t, _): (TyperParams, HashVocab) = load_model(&typer.checkpoint).unwrap();
    assert!(!d.encoder.bitwise_eq(&t.encoder));
}

#[test]
fn eval_command_writes_report_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config();
    let test = write_synthetic_data(dir.path(), &mut cfg, 3);
    let det = train_span_command(&cfg, dir.path()).unwrap();
    let typ = train_typing_command(&cfg, dir.path()).unwrap();
    let out = dir.path().join("eval");
    let report = eval_command(&cfg, &det.checkpoint, &typ.checkpoint, &test, Some(&out)).unwrap();
    assert_eq!(report.per_seed.len(), 2);
    assert_eq!(report.episodes, test.len());
    let written: metaner::pipeline::EvalReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(written, report);
    let n_query: usize = test.episodes.iter().map(|e| e.query.len()).sum();
    let dump = fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 2 * n_query);
    let line: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    for key in ["seed", "episode_id", "sentence_id", "predicted", "gold"] {
        assert!(line.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config();
    let (det, typ) = models(&cfg);
    let (dp, tp) = (dir.path().join("d.json"), dir.path().join("t.json"));
    save_model(&dp, &det, vocab_for(&cfg)).unwrap();
    save_model(&tp, &typ, vocab_for(&cfg)).unwrap();
    let test = EpisodeSet::new(SplitTag::Test);
    let mut wider = cfg.clone();
    wider.encoder.d_model = 16;
    let err = eval_command(&wider, &dp, &tp, &test, None).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("d_model")), "{err}");
    let mut other_vocab = cfg.clone();
    other_vocab.lowercase = true;
    assert!(matches!(
        eval_command(&other_vocab, &dp, &tp, &test, None),
        Err(Error::Config(_))
    ));
    assert!(eval_command(&cfg, &dp, &tp, &test, None).unwrap().is_empty());
}

#[test]
fn span_training_improves_dev_f1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config();
    write_synthetic_data(dir.path(), &mut cfg, 4);
    cfg.detector.meta.max_steps = 300;
    cfg.detector.meta.eval_every = 300;
    cfg.detector.finetune.optimizer = OptimizerKind::Sgd;
    cfg.detector.finetune.lr = 0.1;
    let dev = metaner::load_episodes(cfg.data.dev.as_ref().unwrap(), &Default::default()).unwrap();
    let init = DetectorParams::init(cfg.encoder, cfg.detector.meta.seed).unwrap();
    let before = detector_dev_f1(&init, &dev, &cfg, cfg.detector.meta.seed).unwrap();
    let trained = train_span_command(&cfg, dir.path()).unwrap();
    let after = trained.history.last().unwrap().dev_f1.unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn typer_training_improves_mean_dev_f1() {
    // Untrained prototypes already match repeated words, so single seeds are
    // noisy; the mean over seeds must still improve.
    let syn = SyntheticConfig::default();
    let shape = EpisodeShape {
        n_way: 4,
        k_shot: 1,
        query_shots: 2,
    };
    let types: Vec<usize> = (0..8).collect();
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 1..=5u64 {
        let train = document_episodes(&syn, &types, shape, 0, 100, seed, SplitTag::Train).unwrap();
        let dev = document_episodes(&syn, &types, shape, 1000, 20, seed, SplitTag::Dev).unwrap();
        let mut cfg = small_run_config();
        cfg.encoder.vocab_size = 1024;
        cfg.encoder.d_emb = 16;
        cfg.encoder.d_model = 16;
        cfg.typer.meta.max_steps = 300;
        cfg.typer.meta.eval_every = 300;
        cfg.typer.meta.seed = seed;
        cfg.typer.finetune.steps = 10;
        let init = TyperParams::init(cfg.encoder, seed ^ 0x5555_5555_5555_5555).unwrap();
        before += typer_dev_f1(&init, &dev, &cfg, seed).unwrap() / 5.0;
        let out = train_typer(&cfg, &train, &dev).unwrap();
        after += out.history.last().unwrap().dev_f1.unwrap() / 5.0;
    }
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn embedding_dump_has_one_line_per_gold_span() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config();
    let (_, typ) = models(&cfg);
    let mut set = EpisodeSet::new(SplitTag::Test);
    set.episodes = vec![episode()];
    let path = dir.path().join("emb.tsv");
    let n = dump_embeddings(&typ, &set, &cfg, 1, 2, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(n, 4);
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 7 + cfg.encoder.d_model);
    }
}
