//! Differentiable contextual token encoder.
//!
//! The reference backend embeds each token and mixes it with its immediate
//! neighbours:
//!
//! ```text
//! h_i = tanh(W_c e_i + W_l e_{i-1} + W_r e_{i+1} + b)
//! ```
//!
//! with zero padding at sentence boundaries and inverted dropout on `h` in
//! train mode. Gradients are exact and computed by hand.

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gemv_acc, gemv_t_acc, outer_acc, Matrix};
use crate::params::{Buffer, ParamSet};
use crate::vocab::UNK_ID;

/// Random source for dropout masks and initialization.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Embedding entries are drawn uniformly from `±embed_init`.
    pub embed_init: f64,
    /// Mixing weights are drawn uniformly from `±weight_init`.
    pub weight_init: f64,
    pub freeze_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 4096,
            d_emb: 32,
            d_model: 32,
            max_len: 128,
            dropout: 0.1,
            embed_init: 0.5,
            weight_init: 0.25,
            freeze_embeddings: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_emb == 0 || self.d_model == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("degenerate encoder shape {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(self.embed_init >= 0.0 && self.weight_init >= 0.0) {
            return Err(Error::Config("init ranges must be >= 0".into()));
        }
        Ok(())
    }
}

/// Encoder weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: Buffer,
    pub w_center: Buffer,
    pub w_left: Buffer,
    pub w_right: Buffer,
    pub bias: Buffer,
}

/// Shape-congruent gradient carrier for [`EncoderParams`].
pub type GradientSet = EncoderParams;

impl ParamSet for EncoderParams {
    fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.embedding, &self.w_center, &self.w_left, &self.w_right, &self.bias]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![
            &mut self.embedding,
            &mut self.w_center,
            &mut self.w_left,
            &mut self.w_right,
            &mut self.bias,
        ]
    }
}

/// Per-token representations, one row per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Matrix,
}

/// Intermediate values kept from a forward pass for the matching backward.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    ids: Vec<usize>,
    /// tanh activations before dropout.
    act: Matrix,
    /// Per-entry dropout multiplier (0 or 1/(1-p)); `None` in eval mode.
    mask: Option<Vec<f64>>,
}

impl EncoderTrace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Contract for contextual token encoders. A pretrained backend can plug in
/// here as long as it provides exact gradients for its trainable buffers.
pub trait TokenEncoder: ParamSet {
    fn d_model(&self) -> usize;

    /// Eval mode when `dropout_rng` is `None`.
    fn encode(&self, ids: &[usize], dropout_rng: Option<&mut Rng>) -> Result<(EncoderOutput, EncoderTrace)>;

    /// Accumulates gradients of a scalar loss into `grads` given `∂loss/∂h`.
    fn backward_into(&self, trace: &EncoderTrace, grad_h: &Matrix, grads: &mut Self) -> Result<()>;
}

impl EncoderParams {
    /// Uniform initialization, deterministic in `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut fill = |name: &str, shape: Vec<usize>, r: f64| {
            let mut b = Buffer::zeros(name, shape);
            for x in &mut b.data {
                *x = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
            }
            b
        };
        let (v, e, m) = (config.vocab_size, config.d_emb, config.d_model);
        let mut embedding = fill("encoder.embedding", vec![v, e], config.embed_init);
        embedding.frozen = config.freeze_embeddings;
        let w_center = fill("encoder.w_center", vec![m, e], config.weight_init);
        let w_left = fill("encoder.w_left", vec![m, e], config.weight_init);
        let w_right = fill("encoder.w_right", vec![m, e], config.weight_init);
        let bias = Buffer::zeros("encoder.bias", vec![m]);
        Ok(EncoderParams {
            config,
            embedding,
            w_center,
            w_left,
            w_right,
            bias,
        })
    }

    pub fn set_frozen_embeddings(&mut self, frozen: bool) {
        self.config.freeze_embeddings = frozen;
        self.embedding.frozen = frozen;
    }

    fn embed(&self, id: usize) -> &[f64] {
        let id = if id < self.config.vocab_size { id } else { UNK_ID };
        self.embedding.row(id)
    }

    /// Gradient of a scalar loss given `∂loss/∂h`, in a fresh buffer set.
    pub fn backward(&self, trace: &EncoderTrace, grad_h: &Matrix) -> Result<GradientSet> {
        let mut g = self.zeros_like();
        self.backward_into(trace, grad_h, &mut g)?;
        Ok(g)
    }
}

impl TokenEncoder for EncoderParams {
    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn encode(&self, ids: &[usize], dropout_rng: Option<&mut Rng>) -> Result<(EncoderOutput, EncoderTrace)> {
        let cfg = &self.config;
        if ids.len() > cfg.max_len {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds maximum {}",
                ids.len(),
                cfg.max_len
            )));
        }
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < cfg.vocab_size { i } else { UNK_ID })
            .collect();
        let (e, m) = (cfg.d_emb, cfg.d_model);
        let len = ids.len();
        let mut act = Matrix::zeros(len, m);
        for i in 0..len {
            let row = act.row_mut(i);
            row.copy_from_slice(&self.bias.data);
            gemv_acc(&self.w_center.data, e, self.embed(ids[i]), row);
            if i > 0 {
                gemv_acc(&self.w_left.data, e, self.embed(ids[i - 1]), row);
            }
            if i + 1 < len {
                gemv_acc(&self.w_right.data, e, self.embed(ids[i + 1]), row);
            }
            row.iter_mut().for_each(|x| *x = x.tanh());
        }
        let mask = match dropout_rng {
            Some(rng) if cfg.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - cfg.dropout);
                Some(
                    (0..len * m)
                        .map(|_| if rng.gen::<f64>() < cfg.dropout { 0.0 } else { keep })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let mut h = act.clone();
        if let Some(mask) = &mask {
            h.data.iter_mut().zip(mask).for_each(|(x, k)| *x *= k);
        }
        Ok((EncoderOutput { h }, EncoderTrace { ids, act, mask }))
    }

    fn backward_into(&self, trace: &EncoderTrace, grad_h: &Matrix, grads: &mut Self) -> Result<()> {
        let cfg = &self.config;
        let (e, m) = (cfg.d_emb, cfg.d_model);
        let len = trace.ids.len();
        if grad_h.rows != len || grad_h.cols != m {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} for output {}x{}",
                grad_h.rows, grad_h.cols, len, m
            )));
        }
        if grads.embedding.shape != self.embedding.shape || grads.bias.shape != self.bias.shape {
            return Err(Error::Shape("gradient buffers do not match encoder".into()));
        }
        // ∂loss/∂(pre-activation)
        let mut grad_pre = grad_h.clone();
        if let Some(mask) = &trace.mask {
            grad_pre.data.iter_mut().zip(mask).for_each(|(g, k)| *g *= k);
        }
        grad_pre
            .data
            .iter_mut()
            .zip(&trace.act.data)
            .for_each(|(g, a)| *g *= 1.0 - a * a);

        let frozen = self.embedding.frozen;
        let mut grad_emb = vec![0.0; e];
        for i in 0..len {
            let gp = grad_pre.row(i);
            for (b, g) in grads.bias.data.iter_mut().zip(gp) {
                *b += g;
            }
            outer_acc(&mut grads.w_center.data, e, gp, self.embed(trace.ids[i]));
            if i > 0 {
                outer_acc(&mut grads.w_left.data, e, gp, self.embed(trace.ids[i - 1]));
            }
            if i + 1 < len {
                outer_acc(&mut grads.w_right.data, e, gp, self.embed(trace.ids[i + 1]));
            }
            if frozen {
                continue;
            }
            // e_i feeds position i (centre), i+1 (as left) and i-1 (as right).
            grad_emb.iter_mut().for_each(|x| *x = 0.0);
            gemv_t_acc(&self.w_center.data, e, gp, &mut grad_emb);
            if i + 1 < len {
                gemv_t_acc(&self.w_left.data, e, grad_pre.row(i + 1), &mut grad_emb);
            }
            if i > 0 {
                gemv_t_acc(&self.w_right.data, e, grad_pre.row(i - 1), &mut grad_emb);
            }
            for (dst, g) in grads.embedding.row_mut(trace.ids[i]).iter_mut().zip(&grad_emb) {
                *dst += g;
            }
        }
        Ok(())
    }
}
