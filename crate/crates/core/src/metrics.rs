//! Exact-match span scoring and the two episode-level F1 protocols.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::TypedSpan;

/// Predicted and gold spans of one query sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub episode_id: usize,
    pub sentence_id: usize,
    pub predicted: Vec<TypedSpan>,
    pub gold: Vec<TypedSpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Counts { tp, fp, fn_ }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        harmonic(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Whether `pred` exactly matches (boundaries and type) a not-yet-matched
/// gold span; marks that gold span as used when it does.
pub fn score_match(pred: &TypedSpan, gold: &[TypedSpan], used: &mut [bool]) -> bool {
    for (g, u) in gold.iter().zip(used.iter_mut()) {
        if !*u && g == pred {
            *u = true;
            return true;
        }
    }
    false
}

/// One-to-one exact-match counts for one sentence.
pub fn score_sentence(predicted: &[TypedSpan], gold: &[TypedSpan]) -> Counts {
    let mut used = vec![false; gold.len()];
    let tp = predicted.iter().filter(|p| score_match(p, gold, &mut used)).count();
    Counts::new(tp, predicted.len() - tp, gold.len() - tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    PooledMicro,
    PerEpisodeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    /// Raw counts pooled over every record.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Standard deviation of per-episode F1 (per-episode protocol only).
    pub f1_std: Option<f64>,
    pub episodes: Vec<EpisodeScore>,
}

impl MetricsReport {
    pub fn counts(&self) -> Counts {
        Counts::new(self.tp, self.fp, self.fn_)
    }
}

fn per_episode_counts(records: &[PredictionRecord]) -> BTreeMap<usize, Counts> {
    let mut by_episode: BTreeMap<usize, Counts> = BTreeMap::new();
    for r in records {
        by_episode
            .entry(r.episode_id)
            .or_default()
            .add(score_sentence(&r.predicted, &r.gold));
    }
    by_episode
}

/// Counts pooled over all episodes, then one P/R/F1.
pub fn evaluate_pooled(records: &[PredictionRecord]) -> MetricsReport {
    let mut total = Counts::default();
    for r in records {
        total.add(score_sentence(&r.predicted, &r.gold));
    }
    from_pooled_counts(total)
}

pub fn from_pooled_counts(total: Counts) -> MetricsReport {
    MetricsReport {
        protocol: Protocol::PooledMicro,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        f1_std: None,
        episodes: Vec::new(),
    }
}

/// P/R/F1 inside each episode, then the arithmetic mean across episodes.
pub fn evaluate_per_episode(records: &[PredictionRecord]) -> MetricsReport {
    from_episode_counts(per_episode_counts(records))
}

pub fn from_episode_counts(by_episode: BTreeMap<usize, Counts>) -> MetricsReport {
    let mut total = Counts::default();
    let episodes: Vec<EpisodeScore> = by_episode
        .into_iter()
        .map(|(episode_id, counts)| {
            total.add(counts);
            EpisodeScore {
                episode_id,
                counts,
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
            }
        })
        .collect();
    let (p, r, f) = (
        mean(episodes.iter().map(|e| e.precision)),
        mean(episodes.iter().map(|e| e.recall)),
        mean(episodes.iter().map(|e| e.f1)),
    );
    MetricsReport {
        protocol: Protocol::PerEpisodeMean,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: p,
        recall: r,
        f1: f,
        f1_std: Some(std_dev(episodes.iter().map(|e| e.f1))),
        episodes,
    }
}

pub fn evaluate(records: &[PredictionRecord], protocol: Protocol) -> MetricsReport {
    match protocol {
        Protocol::PooledMicro => evaluate_pooled(records),
        Protocol::PerEpisodeMean => evaluate_per_episode(records),
    }
}

/// Same records with every type erased, for span-detection-only scores.
pub fn untyped(records: &[PredictionRecord]) -> Vec<PredictionRecord> {
    let strip = |spans: &[TypedSpan]| -> Vec<TypedSpan> {
        spans.iter().map(|s| TypedSpan::new(s.start, s.end, "ENTITY")).collect()
    };
    records
        .iter()
        .map(|r| PredictionRecord {
            episode_id: r.episode_id,
            sentence_id: r.sentence_id,
            predicted: strip(&r.predicted),
            gold: strip(&r.gold),
        })
        .collect()
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Population standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v.iter().copied());
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}
