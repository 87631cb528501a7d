#![allow(dead_code)]

use metaner::params::ParamSet;
use metaner::{EncoderConfig, Episode, LabeledSequence, TypedSpan};

pub const EPS: f64 = 1e-5;

/// Toy encoder small enough that every entry of every buffer can be checked.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 13,
        d_emb: 4,
        d_model: 3,
        max_len: 32,
        dropout: 0.0,
        embed_init: 0.8,
        weight_init: 0.6,
        freeze_embeddings: false,
    }
}

pub fn seq(tokens: &str, spans: &[(usize, usize, &str)]) -> LabeledSequence {
    LabeledSequence::new(
        tokens.split_whitespace().map(String::from).collect(),
        spans.iter().map(|&(s, e, t)| TypedSpan::new(s, e, t)).collect(),
    )
    .unwrap()
}

/// Two-type episode with multi-token spans and a repeated support type.
pub fn toy_episode() -> Episode {
    Episode {
        support: vec![
            seq("jack gordon is an actor", &[(0, 1, "person")]),
            seq("she moved to paris and then rome", &[(3, 3, "city"), (6, 6, "city")]),
            seq("mary smith lives in oslo", &[(0, 1, "person"), (4, 4, "city")]),
        ],
        query: vec![
            seq(
                "john met anna in berlin",
                &[(0, 0, "person"), (2, 2, "person"), (4, 4, "city")],
            ),
            seq("the mayor of new york spoke", &[(3, 4, "city")]),
        ],
        types: vec!["person".into(), "city".into()],
    }
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is numerically zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `loss` over every entry of every unfrozen buffer,
/// compared with `analytic`. Returns the worst relative error and where.
pub fn max_fd_error<P: ParamSet>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    let n_buffers = params.buffers().len();
    for b in 0..n_buffers {
        let (frozen, len, name) = {
            let buf = &params.buffers()[b];
            (buf.frozen, buf.len(), buf.name.clone())
        };
        if frozen {
            continue;
        }
        for i in 0..len {
            let x = params.buffers()[b].data[i];
            probe.buffers_mut()[b].data[i] = x + EPS;
            let up = loss(&probe);
            probe.buffers_mut()[b].data[i] = x - EPS;
            let down = loss(&probe);
            probe.buffers_mut()[b].data[i] = x;
            let numeric = (up - down) / (2.0 * EPS);
            let exact = analytic.buffers()[b].data[i];
            let e = rel_err(exact, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]: analytic {exact:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// A record in episode `episode` whose exact-match counts are (tp, fp, fn):
/// `tp` shared spans, `fp` predictions and `fn_` gold spans found nowhere else.
pub fn record_with_counts(episode: usize, tp: usize, fp: usize, fn_: usize) -> metaner::PredictionRecord {
    let span = |i: usize| TypedSpan::new(i, i, "x");
    let predicted = (0..tp).chain(100..100 + fp).map(span).collect();
    let gold = (0..tp).chain(200..200 + fn_).map(span).collect();
    metaner::PredictionRecord {
        episode_id: episode,
        sentence_id: 0,
        predicted,
        gold,
    }
}

/// Labels that may follow `prev` (`None` at sentence start), written out
/// from the tagging scheme independently of the library's tables.
fn allowed(prev: Option<usize>, next: usize) -> bool {
    // O=0 B=1 I=2 E=3 S=4
    match prev {
        None | Some(0) | Some(3) | Some(4) => matches!(next, 0 | 1 | 4),
        Some(1) | Some(2) => matches!(next, 2 | 3),
        _ => unreachable!(),
    }
}

/// Exhaustive argmax over all scheme-valid label sequences of an `L × 5`
/// score matrix, as label indices. Among tied optima the winner has the
/// lowest label at the last token, then at the one before, and so on.
pub fn brute_force_decode(scores: &metaner::Matrix) -> Vec<usize> {
    let len = scores.rows;
    let total = 5usize.pow(len as u32);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for code in 0..total {
        // the last token is the most significant digit
        let labels: Vec<usize> = (0..len).map(|i| (code / 5usize.pow(i as u32)) % 5).collect();
        let mut prev = None;
        let mut ok = true;
        for &l in &labels {
            ok &= allowed(prev, l);
            prev = Some(l);
        }
        ok &= len == 0 || matches!(labels[len - 1], 0 | 3 | 4);
        if !ok {
            continue;
        }
        let score: f64 = labels.iter().enumerate().map(|(i, &l)| scores.get(i, l)).sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

/// Random `L × 5` log-probability matrix (rows are log-softmax of uniform
/// logits in [-3, 3]).
pub fn random_log_probs(rng: &mut metaner::Rng, len: usize) -> metaner::Matrix {
    use rand::Rng as _;
    let mut m = metaner::Matrix::zeros(len, 5);
    for r in 0..len {
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        for (c, x) in logits.iter().enumerate() {
            m.row_mut(r)[c] = x - z;
        }
    }
    m
}

/// Random sorted non-overlapping spans inside a sentence of length `len`.
pub fn random_spans(rng: &mut metaner::Rng, len: usize) -> Vec<metaner::Span> {
    use rand::Rng as _;
    let mut spans = Vec::new();
    let mut i = 0;
    while i < len {
        if rng.gen_bool(0.4) {
            let end = (i + rng.gen_range(0..4)).min(len - 1);
            spans.push(metaner::Span::new(i, end));
            i = end + 1 + rng.gen_range(0..2);
        } else {
            i += 1;
        }
    }
    spans
}

/// Small end-to-end configuration: tiny encoder, short schedules.
pub fn small_run_config() -> metaner::RunConfig {
    let mut cfg = metaner::RunConfig {
        seeds: vec![1, 2],
        ..metaner::RunConfig::default()
    };
    cfg.encoder.vocab_size = 512;
    cfg.encoder.d_emb = 8;
    cfg.encoder.d_model = 8;
    for m in [&mut cfg.detector.meta, &mut cfg.typer.meta] {
        m.max_steps = 20;
        m.eval_every = 10;
        m.meta_lr = 0.01;
    }
    for f in [&mut cfg.detector.finetune, &mut cfg.typer.finetune] {
        f.steps = 3;
    }
    cfg
}

/// Writes synthetic train/dev/test episode files into `dir` and points
/// `cfg.data` at them. Test types are disjoint from train types.
pub fn write_synthetic_data(dir: &std::path::Path, cfg: &mut metaner::RunConfig, seed: u64) -> metaner::EpisodeSet {
    use metaner::synthetic::{document_episodes, SyntheticConfig};
    use metaner::{EpisodeShape, SplitTag};
    let syn = SyntheticConfig::default();
    let shape = EpisodeShape {
        n_way: 2,
        k_shot: 1,
        query_shots: 2,
    };
    let train = document_episodes(&syn, &[0, 1, 2, 3], shape, 0, 20, seed, SplitTag::Train).unwrap();
    let dev = document_episodes(&syn, &[0, 1, 2, 3], shape, 1000, 4, seed, SplitTag::Dev).unwrap();
    let test = document_episodes(&syn, &[8, 9], shape, 2000, 6, seed, SplitTag::Test).unwrap();
    for (name, set) in [("train", &train), ("dev", &dev), ("test", &test)] {
        metaner::save_episodes(set, dir.join(format!("{name}.jsonl"))).unwrap();
    }
    cfg.data.train = Some(dir.join("train.jsonl"));
    cfg.data.dev = Some(dir.join("dev.jsonl"));
    cfg.data.test = Some(dir.join("test.jsonl"));
    test
}
