//! First-order optimizers over [`ParamSet`]s: plain SGD and AdamW with an
//! optional linear warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::Adamw),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Fraction of the run spent in linear warmup. `None` keeps the rate
    /// constant; `Some(f)` warms up over `⌊f·T⌋` steps then decays linearly to
    /// zero at step `T`.
    #[serde(default)]
    pub warmup_fraction: Option<f64>,
}

fn default_weight_decay() -> f64 {
    0.01
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
            warmup_fraction: None,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr,
            weight_decay: 0.01,
            warmup_fraction: Some(0.01),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if let Some(f) = self.warmup_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("warmup fraction {f} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier at 0-based `step` of a `total`-step run.
pub fn schedule_factor(warmup_fraction: Option<f64>, step: usize, total: usize) -> f64 {
    let Some(frac) = warmup_fraction else {
        return 1.0;
    };
    let total = total.max(1);
    let warmup = (frac * total as f64).floor() as usize;
    if step < warmup {
        (step + 1) as f64 / (warmup + 1) as f64
    } else {
        let remaining = total.saturating_sub(step) as f64;
        remaining / (total - warmup).max(1) as f64
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Stateful optimizer bound to one parameter shape. Moments start at zero.
#[derive(Debug, Clone)]
pub struct Optimizer<P: ParamSet> {
    config: OptimizerConfig,
    total_steps: usize,
    step: usize,
    moments: Option<(P, P)>,
}

impl<P: ParamSet> Optimizer<P> {
    pub fn new(config: OptimizerConfig, total_steps: usize) -> Self {
        Optimizer {
            config,
            total_steps,
            step: 0,
            moments: None,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * schedule_factor(self.config.warmup_fraction, self.step, self.total_steps)
    }

    /// Applies one update. Frozen buffers are never touched.
    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                if self.config.weight_decay > 0.0 {
                    for b in params.buffers_mut() {
                        if !b.frozen {
                            let keep = 1.0 - lr * self.config.weight_decay;
                            b.data.iter_mut().for_each(|x| *x *= keep);
                        }
                    }
                }
                params.axpy_update(grads, lr)
            }
            OptimizerKind::Adamw => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (params.zeros_like(), params.zeros_like()));
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let wd = self.config.weight_decay;
                let gs = grads.buffers();
                let ps = params.buffers_mut();
                if gs.len() != ps.len() {
                    return Err(Error::Shape("optimizer: buffer count mismatch".into()));
                }
                for (((p, g), m), v) in ps.into_iter().zip(gs).zip(m.buffers_mut()).zip(v.buffers_mut()) {
                    if p.shape != g.shape {
                        return Err(Error::Shape(format!("optimizer: buffer `{}`", p.name)));
                    }
                    if p.frozen {
                        continue;
                    }
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                        v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                        let mhat = m.data[i] / c1;
                        let vhat = v.data[i] / c2;
                        p.data[i] -= lr * (mhat / (vhat.sqrt() + EPS) + wd * p.data[i]);
                    }
                }
                Ok(())
            }
        }
    }
}
