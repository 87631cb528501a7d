//! End-to-end orchestration: stage training, meta-test episode execution
//! (fine-tune detector, detect, fine-tune typer, classify) and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model};
use crate::config::{EvalProtocol, RunConfig};
use crate::detector::{DetectionTask, DetectorParams};
use crate::encoder::{rng_from_seed, EncoderConfig};
use crate::episode::{Episode, EpisodeSet, Span, SplitTag, TypedSpan};
use crate::episode_io::{load_episodes, LoadOptions};
use crate::error::{Error, Result};
use crate::maml::{fine_tune, meta_train, write_metrics_log, HistoryPoint, TrainOutcome};
use crate::metrics::{self, evaluate, untyped, MetricsReport, PredictionRecord, Protocol};
use crate::params::ParamSet;
use crate::typing::{TyperParams, TypingTask};
use crate::vocab::HashVocab;

pub fn vocab_for(config: &RunConfig) -> HashVocab {
    HashVocab {
        size: config.encoder.vocab_size,
        lowercase: config.lowercase,
    }
}

pub fn detection_task(config: &RunConfig) -> DetectionTask {
    DetectionTask {
        vocab: vocab_for(config),
        lambda_train: config.detector.lambda_train,
        lambda_query: config.detector.lambda_query,
        dropout: config.encoder.dropout > 0.0,
    }
}

pub fn typing_task(config: &RunConfig) -> TypingTask {
    TypingTask {
        vocab: vocab_for(config),
        options: config.typer.typing_options(),
        dropout: config.encoder.dropout > 0.0,
    }
}

fn protocol_of(p: EvalProtocol) -> Protocol {
    match p {
        EvalProtocol::PooledMicro => Protocol::PooledMicro,
        EvalProtocol::PerEpisodeMean => Protocol::PerEpisodeMean,
    }
}

/// Per-episode random stream, independent of execution order.
fn episode_seed(seed: u64, episode_id: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (episode_id as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Meta-test one episode. The meta-parameters are only read.
pub fn run_episode(
    detector: &DetectorParams,
    typer: &TyperParams,
    episode: &Episode,
    episode_id: usize,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    run_episode_inner(detector, typer, episode, episode_id, config, seed)
        .map_err(|e| e.context(format!("episode {episode_id}")))
}

fn run_episode_inner(
    detector: &DetectorParams,
    typer: &TyperParams,
    episode: &Episode,
    episode_id: usize,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let mut rng = rng_from_seed(episode_seed(seed, episode_id));
    let det_task = detection_task(config);
    let ft = &config.detector.finetune;
    let adapted = fine_tune(detector, &det_task, episode, ft.steps, ft.optimizer_config(), &mut rng)?;
    let detected: Vec<Vec<Span>> = episode
        .query
        .iter()
        .map(|q| adapted.params.detect_spans(&det_task.vocab.ids(&q.tokens)))
        .collect::<Result<_>>()?;
    let typ_task = typing_task(config);
    let ft = &config.typer.finetune;
    let decisions = typ_task.meta_test_typing(typer, episode, &detected, ft.steps, ft.optimizer_config(), &mut rng)?;
    Ok(episode
        .query
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(sentence_id, (q, ds))| PredictionRecord {
            episode_id,
            sentence_id,
            predicted: ds
                .into_iter()
                .map(|d| TypedSpan::new(d.span.start, d.span.end, d.predicted_type))
                .collect(),
            gold: q.spans.clone(),
        })
        .collect())
}

fn run_parallel<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    // Collected in index order, so results do not depend on scheduling.
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Runs every episode of `set`; records come back in episode order.
pub fn run_episodes(
    detector: &DetectorParams,
    typer: &TyperParams,
    set: &EpisodeSet,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let per_episode = run_parallel(config.threads, set.len(), |i| {
        run_episode(detector, typer, &set.episodes[i], i, config, seed)
    })?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Span-only F1 of a detector after support fine-tuning, pooled over `dev`.
pub fn detector_dev_f1(detector: &DetectorParams, dev: &EpisodeSet, config: &RunConfig, seed: u64) -> Result<f64> {
    let task = detection_task(config);
    let ft = &config.detector.finetune;
    let counts = run_parallel(config.threads, dev.len(), |i| {
        let ep = &dev.episodes[i];
        let mut rng = rng_from_seed(episode_seed(seed, i));
        let adapted = fine_tune(detector, &task, ep, ft.steps, ft.optimizer_config(), &mut rng)?;
        let mut c = metrics::Counts::default();
        for q in &ep.query {
            let pred: Vec<TypedSpan> = adapted
                .params
                .detect_spans(&task.vocab.ids(&q.tokens))?
                .into_iter()
                .map(|s| TypedSpan::new(s.start, s.end, "ENTITY"))
                .collect();
            let gold: Vec<TypedSpan> = q
                .spans
                .iter()
                .map(|s| TypedSpan::new(s.start, s.end, "ENTITY"))
                .collect();
            c.add(metrics::score_sentence(&pred, &gold));
        }
        Ok(c)
    })?;
    let mut total = metrics::Counts::default();
    counts.into_iter().for_each(|c| total.add(c));
    Ok(total.f1())
}

/// Typing F1 on gold query spans after support fine-tuning, pooled over `dev`.
pub fn typer_dev_f1(typer: &TyperParams, dev: &EpisodeSet, config: &RunConfig, seed: u64) -> Result<f64> {
    let records = typer_gold_span_records(typer, dev, config, seed, config.typer.finetune.steps)?;
    Ok(metrics::evaluate_pooled(&records).f1)
}

/// Types the gold query spans of every episode (isolates the typing stage).
pub fn typer_gold_span_records(
    typer: &TyperParams,
    set: &EpisodeSet,
    config: &RunConfig,
    seed: u64,
    finetune_steps: usize,
) -> Result<Vec<PredictionRecord>> {
    let task = typing_task(config);
    let opt = config.typer.finetune.optimizer_config();
    let per_episode = run_parallel(config.threads, set.len(), |i| {
        let ep = &set.episodes[i];
        let mut rng = rng_from_seed(episode_seed(seed, i));
        let spans: Vec<Vec<Span>> = ep.query.iter().map(|q| q.untyped_spans()).collect();
        let decisions = task.meta_test_typing(typer, ep, &spans, finetune_steps, opt, &mut rng)?;
        Ok(ep
            .query
            .iter()
            .zip(decisions)
            .enumerate()
            .map(|(sentence_id, (q, ds))| PredictionRecord {
                episode_id: i,
                sentence_id,
                predicted: ds
                    .into_iter()
                    .map(|d| TypedSpan::new(d.span.start, d.span.end, d.predicted_type))
                    .collect(),
                gold: q.spans.clone(),
            })
            .collect::<Vec<_>>())
    })?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Meta-trains (or conventionally trains) the span detector from a fresh
/// initialization seeded by `detector.meta.seed`.
pub fn train_detector(
    config: &RunConfig,
    train: &EpisodeSet,
    dev: &EpisodeSet,
) -> Result<TrainOutcome<DetectorParams>> {
    config.validate()?;
    let meta = &config.detector.meta;
    let init = DetectorParams::init(config.encoder, meta.seed)?;
    let task = detection_task(config);
    meta_train(
        &init,
        train,
        dev,
        &task,
        |p: &DetectorParams, d: &EpisodeSet| detector_dev_f1(p, d, config, meta.seed),
        meta,
    )
}

/// Meta-trains (or conventionally trains) the typer from a fresh
/// initialization seeded by `typer.meta.seed`.
pub fn train_typer(config: &RunConfig, train: &EpisodeSet, dev: &EpisodeSet) -> Result<TrainOutcome<TyperParams>> {
    config.validate()?;
    let meta = &config.typer.meta;
    // Distinct stream from the detector: the two encoders never share weights.
    let init = TyperParams::init(config.encoder, meta.seed ^ 0x5555_5555_5555_5555)?;
    let task = typing_task(config);
    meta_train(
        &init,
        train,
        dev,
        &task,
        |p: &TyperParams, d: &EpisodeSet| typer_dev_f1(p, d, config, meta.seed),
        meta,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub end_to_end: MetricsReport,
    pub span_only: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub episodes: usize,
    pub per_seed: Vec<SeedResult>,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub precision_mean: f64,
    pub recall_mean: f64,
    pub span_f1_mean: f64,
    pub span_f1_std: f64,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.episodes == 0
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.per_seed {
            let _ = writeln!(
                s,
                "seed {}: P {:.4} R {:.4} F1 {:.4} | span F1 {:.4}",
                r.seed, r.end_to_end.precision, r.end_to_end.recall, r.end_to_end.f1, r.span_only.f1
            );
        }
        let _ = writeln!(
            s,
            "{:?} over {} episodes: F1 {:.4} ± {:.4} | span F1 {:.4} ± {:.4}",
            self.protocol, self.episodes, self.f1_mean, self.f1_std, self.span_f1_mean, self.span_f1_std
        );
        s
    }
}

/// Prediction records of one seed, as written to the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPredictions {
    pub seed: u64,
    pub records: Vec<PredictionRecord>,
}

/// Aggregates per-seed results into mean ± std.
pub fn summarize(protocol: Protocol, episodes: usize, per_seed: Vec<SeedResult>) -> EvalReport {
    let f1 = || per_seed.iter().map(|r| r.end_to_end.f1);
    let span = || per_seed.iter().map(|r| r.span_only.f1);
    EvalReport {
        protocol,
        episodes,
        f1_mean: metrics::mean(f1()),
        f1_std: metrics::std_dev(f1()),
        precision_mean: metrics::mean(per_seed.iter().map(|r| r.end_to_end.precision)),
        recall_mean: metrics::mean(per_seed.iter().map(|r| r.end_to_end.recall)),
        span_f1_mean: metrics::mean(span()),
        span_f1_std: metrics::std_dev(span()),
        per_seed,
    }
}

/// Checks that checkpoints fit the configured encoder and vocabulary.
pub fn check_compatible(config: &RunConfig, what: &str, ck: EncoderConfig, vocab: HashVocab) -> Result<()> {
    let want = &config.encoder;
    if ck.d_model != want.d_model || ck.d_emb != want.d_emb || ck.vocab_size != want.vocab_size {
        return Err(Error::Config(format!(
            "{what} checkpoint has d_emb {} d_model {} vocab {}, config expects d_emb {} d_model {} vocab {}",
            ck.d_emb, ck.d_model, ck.vocab_size, want.d_emb, want.d_model, want.vocab_size
        )));
    }
    if vocab != vocab_for(config) {
        return Err(Error::Config(format!(
            "{what} checkpoint vocabulary {vocab:?} differs from configured {:?}",
            vocab_for(config)
        )));
    }
    Ok(())
}

/// Meta-tests both models on `test` once per configured seed.
pub fn evaluate_models(
    detector: &DetectorParams,
    typer: &TyperParams,
    test: &EpisodeSet,
    config: &RunConfig,
) -> Result<(EvalReport, Vec<SeedPredictions>)> {
    let protocol = protocol_of(config.protocol);
    if test.is_empty() {
        return Ok((summarize(protocol, 0, Vec::new()), Vec::new()));
    }
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    let mut dumps = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let records = run_episodes(detector, typer, test, config, seed)?;
        let end_to_end = evaluate(&records, protocol);
        let span_only = evaluate(&untyped(&records), protocol);
        info!("seed {seed}: F1 {:.4}, span F1 {:.4}", end_to_end.f1, span_only.f1);
        per_seed.push(SeedResult {
            seed,
            end_to_end,
            span_only,
        });
        dumps.push(SeedPredictions { seed, records });
    }
    Ok((summarize(protocol, test.len(), per_seed), dumps))
}

fn load_split(config: &RunConfig, path: &Option<PathBuf>, split: SplitTag, what: &str) -> Result<EpisodeSet> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("data.{what} path is not set")))?;
    let opts = LoadOptions {
        format: config.data.format.parse()?,
        strict: config.data.strict,
        split_tag: split,
    };
    load_episodes(path, &opts)
}

fn load_dev(config: &RunConfig) -> Result<EpisodeSet> {
    match &config.data.dev {
        Some(_) => load_split(config, &config.data.dev, SplitTag::Dev, "dev"),
        None => Ok(EpisodeSet::new(SplitTag::Dev)),
    }
}

/// Paths written by a training command.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub best_step: usize,
    pub history: Vec<HistoryPoint>,
}

pub fn train_span_command(config: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    config.validate()?;
    let train = load_split(config, &config.data.train, SplitTag::Train, "train")?;
    let dev = load_dev(config)?;
    let outcome = train_detector(config, &train, &dev)?;
    write_artifacts(
        out_dir,
        "detector",
        &outcome.best,
        vocab_for(config),
        outcome.best_step,
        outcome.history,
    )
}

pub fn train_typing_command(config: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    config.validate()?;
    let train = load_split(config, &config.data.train, SplitTag::Train, "train")?;
    let dev = load_dev(config)?;
    let outcome = train_typer(config, &train, &dev)?;
    write_artifacts(
        out_dir,
        "typer",
        &outcome.best,
        vocab_for(config),
        outcome.best_step,
        outcome.history,
    )
}

fn write_artifacts<M: crate::checkpoint::Checkpointable>(
    out_dir: &Path,
    stem: &str,
    model: &M,
    vocab: HashVocab,
    best_step: usize,
    history: Vec<HistoryPoint>,
) -> Result<TrainArtifacts> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(format!("{stem}.ckpt.json"));
    let metrics_log = out_dir.join(format!("{stem}.metrics.jsonl"));
    save_model(&checkpoint, model, vocab)?;
    write_metrics_log(&metrics_log, &history)?;
    Ok(TrainArtifacts {
        checkpoint,
        metrics_log,
        best_step,
        history,
    })
}

pub fn load_models(config: &RunConfig, detector: &Path, typer: &Path) -> Result<(DetectorParams, TyperParams)> {
    let (det, dv): (DetectorParams, _) = load_model(detector)?;
    check_compatible(config, "detector", det.encoder.config, dv)?;
    let (typ, tv): (TyperParams, _) = load_model(typer)?;
    check_compatible(config, "typer", typ.encoder.config, tv)?;
    Ok((det, typ))
}

/// Loads checkpoints and test episodes, evaluates, and writes the report
/// and prediction dump into `out_dir` when given.
pub fn eval_command(
    config: &RunConfig,
    detector: &Path,
    typer: &Path,
    test: &EpisodeSet,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    config.validate()?;
    let (det, typ) = load_models(config, detector, typer)?;
    let (report, dumps) = evaluate_models(&det, &typ, test, config)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report_path = dir.join("report.json");
        fs::write(
            &report_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| Error::io(&report_path, e))?;
        write_predictions(&dir.join("predictions.jsonl"), &dumps)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a PredictionRecord,
}

pub fn write_predictions(path: &Path, dumps: &[SeedPredictions]) -> Result<()> {
    let mut out = String::new();
    for d in dumps {
        for r in &d.records {
            out.push_str(
                &serde_json::to_string(&PredictionLine {
                    seed: d.seed,
                    record: r,
                })
                .expect("record serializes"),
            );
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes one tab-separated line per gold span of every episode:
/// `episode  role  sentence  start  end  gold  predicted  v_1 … v_d`, where
/// `role` is `support` or `query` and vectors come from the typer after
/// `finetune_steps` support updates.
pub fn dump_embeddings(
    typer: &TyperParams,
    set: &EpisodeSet,
    config: &RunConfig,
    seed: u64,
    finetune_steps: usize,
    path: &Path,
) -> Result<usize> {
    let task = typing_task(config);
    let opt = config.typer.finetune.optimizer_config();
    let mut out = String::new();
    let mut lines = 0;
    for (i, ep) in set.episodes.iter().enumerate() {
        let mut rng = rng_from_seed(episode_seed(seed, i));
        let adapted = task.proto_inner_update(typer, ep, finetune_steps, opt, &mut rng)?;
        let protos = task.compute_prototypes(&adapted.params, &ep.support, &ep.types)?;
        for (role, sents) in [("support", &ep.support), ("query", &ep.query)] {
            for (sid, s) in sents.iter().enumerate() {
                let spans = s.untyped_spans();
                let reps = task.span_vectors(&adapted.params, &s.tokens, &spans)?;
                let decisions = crate::typing::classify_vectors(&reps, &protos, task.options.distance, None);
                for ((gold, (_, v)), d) in s.spans.iter().zip(&reps).zip(&decisions) {
                    let _ = write!(
                        out,
                        "{i}\t{role}\t{sid}\t{}\t{}\t{}\t{}",
                        gold.start, gold.end, gold.entity_type, d.predicted_type
                    );
                    for x in v {
                        let _ = write!(out, "\t{x}");
                    }
                    out.push('\n');
                    lines += 1;
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(lines)
}

/// Bitwise comparison helper for isolation checks.
pub fn unchanged<P: ParamSet>(before: &P, after: &P) -> bool {
    before.bitwise_eq(after)
}
