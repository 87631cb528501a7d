//! Decomposed meta-learning for few-shot named entity recognition.
//!
//! Recognition is split into two independently trained stages:
//!
//! 1. a class-agnostic BIOES span detector ([`detector`]) meta-trained with
//!    first-order MAML ([`maml`]), and
//! 2. a prototype-network entity typer ([`typing`]) whose embedding space
//!    is likewise meta-trained and fine-tuned on each novel episode's
//!    support set.
//!
//! [`pipeline`] ties the stages together for meta-testing and scores the
//! output with the episode-level F1 protocols in [`metrics`].

pub mod bioes;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod encoder;
pub mod episode;
pub mod episode_io;
pub mod error;
pub mod maml;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sampler;
pub mod synthetic;
pub mod typing;
pub mod viterbi;
pub mod vocab;

pub use bioes::{bioes_decode, bioes_encode, BioesLabel};
pub use config::RunConfig;
pub use detector::{detection_loss, DetectionTask, DetectorParams, LabelDistribution};
pub use encoder::{EncoderConfig, EncoderOutput, EncoderParams, GradientSet, Rng, TokenEncoder};
pub use episode::{spans_from_tags, tags_from_spans, Episode, EpisodeSet, LabeledSequence, Span, SplitTag, TypedSpan};
pub use episode_io::{load_corpus, load_episodes, save_episodes, EpisodeFormat, LoadOptions};
pub use error::{Error, ExitKind, Result};
pub use maml::{
    fine_tune, inner_update, meta_train, AdaptedParams, MetaConfig, MetaLearner, Split, TaskLoss, TrainMode,
};
pub use matrix::Matrix;
pub use metrics::{evaluate_per_episode, evaluate_pooled, MetricsReport, PredictionRecord, Protocol};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use params::{Buffer, ParamSet};
pub use sampler::{sample_episodes, EpisodeShape};
pub use typing::{Distance, PrototypeSet, TyperParams, TypingDecision, TypingOptions, TypingTask};
pub use viterbi::viterbi_decode;
pub use vocab::HashVocab;
