//! Shared fixtures for the kernel benchmarks.

use metaner::encoder::rng_from_seed;
use metaner::matrix::log_softmax;
use metaner::synthetic::{document_episodes, SyntheticConfig};
use metaner::{DetectionTask, DetectorParams, EncoderConfig, Episode, EpisodeShape, HashVocab, Matrix, SplitTag};
use rand::Rng as _;

/// Encoder sizes used by every benchmark.
pub fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 4096,
        d_emb: 32,
        d_model: 32,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

pub fn detector() -> DetectorParams {
    DetectorParams::init(encoder_config(), 7).expect("valid config")
}

pub fn detection_task() -> DetectionTask {
    let mut task = DetectionTask::new(HashVocab::new(encoder_config().vocab_size));
    task.dropout = false;
    task
}

/// A 5-way 1-shot synthetic episode.
pub fn episode() -> Episode {
    let shape = EpisodeShape {
        n_way: 5,
        k_shot: 1,
        query_shots: 2,
    };
    let types: Vec<usize> = (0..5).collect();
    let set = document_episodes(&SyntheticConfig::default(), &types, shape, 0, 1, 3, SplitTag::Test)
        .expect("synthetic episode");
    set.episodes.into_iter().next().expect("one episode")
}

/// Token ids of a sentence of `len` tokens.
pub fn token_ids(len: usize) -> Vec<usize> {
    let mut rng = rng_from_seed(len as u64);
    (0..len)
        .map(|_| rng.gen_range(0..encoder_config().vocab_size))
        .collect()
}

/// Row-normalized random log-probabilities over the five BIOES labels.
pub fn log_probs(len: usize) -> Matrix {
    let mut rng = rng_from_seed(11 + len as u64);
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| log_softmax(&(0..5).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>()))
        .collect();
    Matrix::from_rows(&rows)
}
