//! First-order model-agnostic meta-learning.
//!
//! The engine is generic over the parameter set and the per-episode task
//! loss. An inner update adapts a deep copy of the meta-parameters on an
//! episode's support set; the meta-update applies the query-set gradient
//! evaluated at the adapted copy directly to the meta-parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{rng_from_seed, Rng};
use crate::episode::{Episode, EpisodeSet};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::{clip_global_norm, ParamSet};

/// Which part of an episode a loss is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
    /// Support and query together; used for conventional (non-episodic
    /// adaptation) training.
    All,
}

/// Per-episode objective: returns the loss and its gradient.
///
/// Only first derivatives are ever requested. The `rng` drives dropout in
/// train mode.
pub trait TaskLoss<P: ParamSet>: Sync {
    fn loss_and_grad(&self, params: &P, episode: &Episode, split: Split, rng: &mut Rng) -> Result<(f64, P)>;
}

/// A deep copy of meta-parameters after adaptation.
#[derive(Debug, Clone)]
pub struct AdaptedParams<P> {
    pub params: P,
    pub episode_id: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Inner update on support, first-order meta-gradient from query.
    Maml,
    /// Plain supervised gradient on support and query at the current
    /// parameters (no inner loop).
    Conventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub inner_optimizer: OptimizerKind,
    pub meta_lr: f64,
    pub meta_optimizer: OptimizerKind,
    /// Episodes aggregated per meta-update.
    pub meta_batch: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global-norm clip on the aggregated meta-gradient; 0 disables.
    pub clip_norm: f64,
    pub mode: TrainMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.1,
            inner_steps: 2,
            inner_optimizer: OptimizerKind::Sgd,
            meta_lr: 3e-3,
            meta_optimizer: OptimizerKind::Adamw,
            meta_batch: 1,
            max_steps: 1000,
            eval_every: 100,
            seed: 42,
            warmup_fraction: 0.01,
            weight_decay: 0.01,
            clip_norm: 5.0,
            mode: TrainMode::Maml,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config("inner_lr must be >= 0".into()));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::Config("meta_lr must be > 0".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction outside [0,1]".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        self.inner_optimizer_config().validate()?;
        self.meta_optimizer_config().validate()
    }

    pub fn inner_optimizer_config(&self) -> OptimizerConfig {
        optimizer_config(
            self.inner_optimizer,
            self.inner_lr,
            self.weight_decay,
            self.warmup_fraction,
        )
    }

    pub fn meta_optimizer_config(&self) -> OptimizerConfig {
        optimizer_config(
            self.meta_optimizer,
            self.meta_lr,
            self.weight_decay,
            self.warmup_fraction,
        )
    }
}

/// SGD runs at a constant rate with no decay; AdamW gets decoupled weight
/// decay and the warmup schedule.
pub fn optimizer_config(kind: OptimizerKind, lr: f64, weight_decay: f64, warmup_fraction: f64) -> OptimizerConfig {
    match kind {
        OptimizerKind::Sgd => OptimizerConfig::sgd(lr),
        OptimizerKind::Adamw => OptimizerConfig {
            kind,
            lr,
            weight_decay,
            warmup_fraction: Some(warmup_fraction),
        },
    }
}

fn check_finite<P: ParamSet>(loss: f64, grads: &P, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{what}: loss is {loss}")));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("{what}: gradient has non-finite entries")));
    }
    Ok(())
}

/// `n` optimizer steps on the episode's support loss, applied to a deep
/// copy. The input is never modified; `n = 0` returns an exact clone.
pub fn inner_update<P: ParamSet, L: TaskLoss<P> + ?Sized>(
    params: &P,
    loss: &L,
    episode: &Episode,
    steps: usize,
    optimizer: OptimizerConfig,
    rng: &mut Rng,
) -> Result<AdaptedParams<P>> {
    let mut adapted = params.clone();
    let mut opt = Optimizer::new(optimizer, steps);
    for step in 0..steps {
        let (value, grads) = loss.loss_and_grad(&adapted, episode, Split::Support, rng)?;
        check_finite(value, &grads, &format!("inner step {step}"))?;
        opt.step(&mut adapted, &grads)?;
    }
    Ok(AdaptedParams {
        params: adapted,
        episode_id: None,
        steps,
    })
}

/// Meta-test adaptation on a novel episode's support set. Same contract as
/// [`inner_update`]; optimizer moments always start from zero.
pub fn fine_tune<P: ParamSet, L: TaskLoss<P> + ?Sized>(
    meta_params: &P,
    loss: &L,
    episode: &Episode,
    steps: usize,
    optimizer: OptimizerConfig,
    rng: &mut Rng,
) -> Result<AdaptedParams<P>> {
    inner_update(meta_params, loss, episode, steps, optimizer, rng)
}

/// Meta-parameters plus the meta-optimizer state that persists across
/// meta-updates.
pub struct MetaLearner<P: ParamSet> {
    pub config: MetaConfig,
    optimizer: Optimizer<P>,
    rng: Rng,
}

impl<P: ParamSet> MetaLearner<P> {
    pub fn new(config: MetaConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.meta_optimizer_config(), config.max_steps);
        let rng = rng_from_seed(config.seed);
        Ok(MetaLearner { config, optimizer, rng })
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// Summed first-order meta-gradient over `batch` and the mean query loss.
    /// Per-episode work may run in parallel; the reduction is in batch order.
    pub fn meta_gradient<L: TaskLoss<P> + ?Sized>(
        &mut self,
        params: &P,
        batch: &[(usize, &Episode)],
        loss: &L,
    ) -> Result<(P, f64)> {
        if batch.is_empty() {
            return Err(Error::Config("meta-update needs at least one episode".into()));
        }
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();
        let config = &self.config;
        let per_episode = |(&(id, episode), seed): (&(usize, &Episode), &u64)| -> Result<(f64, P)> {
            let mut rng = rng_from_seed(*seed);
            let (value, grads) = match config.mode {
                TrainMode::Maml => {
                    let adapted = inner_update(
                        params,
                        loss,
                        episode,
                        config.inner_steps,
                        config.inner_optimizer_config(),
                        &mut rng,
                    )
                    .map_err(|e| e.context(format!("episode {id}")))?;
                    loss.loss_and_grad(&adapted.params, episode, Split::Query, &mut rng)?
                }
                TrainMode::Conventional => loss.loss_and_grad(params, episode, Split::All, &mut rng)?,
            };
            check_finite(value, &grads, &format!("episode {id} query"))?;
            Ok((value, grads))
        };
        let results: Vec<Result<(f64, P)>> = if batch.len() > 1 {
            batch.par_iter().zip(seeds.par_iter()).map(per_episode).collect()
        } else {
            batch.iter().zip(seeds.iter()).map(per_episode).collect()
        };
        let mut total: Option<P> = None;
        let mut loss_sum = 0.0;
        for r in results {
            let (value, grads) = r?;
            loss_sum += value;
            match total.as_mut() {
                None => total = Some(grads),
                Some(t) => t.add_assign(&grads)?,
            }
        }
        Ok((total.expect("nonempty batch"), loss_sum / batch.len() as f64))
    }

    /// One meta-update in place. Returns the mean query loss of the batch.
    pub fn meta_step<L: TaskLoss<P> + ?Sized>(
        &mut self,
        params: &mut P,
        batch: &[(usize, &Episode)],
        loss: &L,
    ) -> Result<f64> {
        let (mut grads, mean_loss) = self.meta_gradient(params, batch, loss)?;
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }
        self.optimizer.step(params, &grads)?;
        Ok(mean_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub mean_query_loss: f64,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub best: P,
    pub best_step: usize,
    pub history: Vec<HistoryPoint>,
}

/// Runs up to `max_steps` meta-updates, scoring on `dev` every `eval_every`
/// steps (and after the final step), and keeps the best-scoring checkpoint.
/// With an empty dev set the last parameters are returned.
pub fn meta_train<P, L, F>(
    init: &P,
    train: &EpisodeSet,
    dev: &EpisodeSet,
    loss: &L,
    mut eval_fn: F,
    config: &MetaConfig,
) -> Result<TrainOutcome<P>>
where
    P: ParamSet,
    L: TaskLoss<P> + ?Sized,
    F: FnMut(&P, &EpisodeSet) -> Result<f64>,
{
    let mut params = init.clone();
    if config.max_steps == 0 {
        return Ok(TrainOutcome {
            best: params,
            best_step: 0,
            history: Vec::new(),
        });
    }
    if train.is_empty() {
        return Err(Error::Validation("no training episodes".into()));
    }
    if dev.is_empty() {
        warn!("empty dev set: keeping the last checkpoint");
    }
    let mut learner = MetaLearner::new(config.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, P)> = None;
    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    for step in 1..=config.max_steps {
        let batch: Vec<(usize, &Episode)> = (0..config.meta_batch)
            .map(|_| {
                let i = learner.rng().gen_range(0..train.len());
                (i, &train.episodes[i])
            })
            .collect();
        let l = learner
            .meta_step(&mut params, &batch, loss)
            .map_err(|e| e.context(format!("meta step {step}")))?;
        window_loss += l;
        window_len += 1;
        if step % config.eval_every == 0 || step == config.max_steps {
            let dev_f1 = if dev.is_empty() {
                None
            } else {
                Some(eval_fn(&params, dev)?)
            };
            let point = HistoryPoint {
                step,
                mean_query_loss: window_loss / window_len as f64,
                dev_f1,
            };
            info!(
                "step {step}: query loss {:.4}, dev F1 {}",
                point.mean_query_loss,
                dev_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"))
            );
            history.push(point);
            window_loss = 0.0;
            window_len = 0;
            if let Some(f1) = dev_f1 {
                if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                    best = Some((f1, step, params.clone()));
                }
            }
        }
    }
    let (best_step, best) = match best {
        Some((_, s, p)) => (s, p),
        None => (config.max_steps, params),
    };
    Ok(TrainOutcome {
        best,
        best_step,
        history,
    })
}

/// Writes one JSON object per history point.
pub fn write_metrics_log(path: impl AsRef<Path>, history: &[HistoryPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for h in history {
        out.push_str(&serde_json::to_string(h).expect("history serializes"));
        out.push('\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
