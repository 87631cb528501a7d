//! Class-agnostic span detector: encoder, linear BIOES head, max-augmented
//! token cross-entropy and constrained decoding.

use serde::{Deserialize, Serialize};

use crate::bioes::{bioes_decode, bioes_encode, BioesLabel, NUM_LABELS};
use crate::encoder::{rng_from_seed, EncoderConfig, EncoderOutput, EncoderParams, EncoderTrace, Rng, TokenEncoder};
use crate::episode::{Episode, LabeledSequence, Span};
use crate::error::{Error, Result};
use crate::maml::{Split, TaskLoss};
use crate::matrix::{gemv_acc, gemv_t_acc, log_softmax, outer_acc, Matrix};
use crate::params::{Buffer, ParamSet};
use crate::viterbi::viterbi_decode;
use crate::vocab::HashVocab;

/// Max-loss weight used when adapting on a support set (inner updates and
/// meta-test fine-tuning).
pub const DEFAULT_LAMBDA_TRAIN: f64 = 5.0;
/// Max-loss weight used for the query loss of a meta-update.
pub const DEFAULT_LAMBDA_QUERY: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub encoder: EncoderParams,
    /// `5 × d_model`, rows in canonical label order.
    pub head_weight: Buffer,
    pub head_bias: Buffer,
}

impl ParamSet for DetectorParams {
    fn buffers(&self) -> Vec<&Buffer> {
        let mut v = self.encoder.buffers();
        v.push(&self.head_weight);
        v.push(&self.head_bias);
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut v = self.encoder.buffers_mut();
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }
}

/// Per-token label distributions `p(x_i)` with their logs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub probs: Matrix,
    pub log_probs: Matrix,
}

impl LabelDistribution {
    pub fn from_logits(logits: &Matrix) -> Self {
        let mut log_probs = Matrix::zeros(logits.rows, logits.cols);
        for (r, row) in logits.iter_rows().enumerate() {
            log_probs.row_mut(r).copy_from_slice(&log_softmax(row));
        }
        let probs = Matrix {
            rows: log_probs.rows,
            cols: log_probs.cols,
            data: log_probs.data.iter().map(|x| x.exp()).collect(),
        };
        LabelDistribution { probs, log_probs }
    }

    pub fn len(&self) -> usize {
        self.probs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows == 0
    }
}

/// Everything a backward pass needs from one forward pass.
pub struct DetectorForward {
    pub output: EncoderOutput,
    pub logits: Matrix,
    pub dist: LabelDistribution,
    trace: EncoderTrace,
}

impl DetectorParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        use rand::Rng as _;
        let encoder = EncoderParams::init(config, seed)?;
        let mut rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut head_weight = Buffer::zeros("head.weight", vec![NUM_LABELS, config.d_model]);
        let r = config.weight_init;
        for x in &mut head_weight.data {
            *x = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
        }
        Ok(DetectorParams {
            encoder,
            head_weight,
            head_bias: Buffer::zeros("head.bias", vec![NUM_LABELS]),
        })
    }

    pub fn forward(&self, ids: &[usize], dropout_rng: Option<&mut Rng>) -> Result<DetectorForward> {
        let (output, trace) = self.encoder.encode(ids, dropout_rng)?;
        let d = self.encoder.d_model();
        let mut logits = Matrix::zeros(output.h.rows, NUM_LABELS);
        for i in 0..output.h.rows {
            let row = logits.row_mut(i);
            row.copy_from_slice(&self.head_bias.data);
            gemv_acc(&self.head_weight.data, d, output.h.row(i), row);
        }
        let dist = LabelDistribution::from_logits(&logits);
        Ok(DetectorForward {
            output,
            logits,
            dist,
            trace,
        })
    }

    /// Eval-mode label distribution.
    pub fn label_distribution(&self, ids: &[usize]) -> Result<LabelDistribution> {
        Ok(self.forward(ids, None)?.dist)
    }

    /// Accumulates parameter gradients given `∂loss/∂logits`.
    pub fn backward_into(&self, fwd: &DetectorForward, grad_logits: &Matrix, grads: &mut DetectorParams) -> Result<()> {
        let h = &fwd.output.h;
        if grad_logits.rows != h.rows || grad_logits.cols != NUM_LABELS {
            return Err(Error::Shape(format!(
                "logit gradient {}x{} for {} tokens",
                grad_logits.rows, grad_logits.cols, h.rows
            )));
        }
        let d = self.encoder.d_model();
        let mut grad_h = Matrix::zeros(h.rows, d);
        for i in 0..h.rows {
            let gl = grad_logits.row(i);
            for (b, g) in grads.head_bias.data.iter_mut().zip(gl) {
                *b += g;
            }
            outer_acc(&mut grads.head_weight.data, d, gl, h.row(i));
            gemv_t_acc(&self.head_weight.data, d, gl, grad_h.row_mut(i));
        }
        self.encoder.backward_into(&fwd.trace, &grad_h, &mut grads.encoder)
    }

    /// Spans found by constrained decoding of the eval-mode distribution.
    pub fn detect_spans(&self, ids: &[usize]) -> Result<Vec<Span>> {
        let dist = self.label_distribution(ids)?;
        Ok(bioes_decode(&viterbi_decode(&dist.log_probs)))
    }

    /// Loss of one labeled sentence, gradient accumulated into `grads` with
    /// weight `scale`.
    pub fn sentence_loss_into(
        &self,
        ids: &[usize],
        gold: &[BioesLabel],
        lambda: f64,
        scale: f64,
        rng: Option<&mut Rng>,
        grads: &mut DetectorParams,
    ) -> Result<f64> {
        let fwd = self.forward(ids, rng)?;
        let (loss, mut grad_logits) = detection_loss(&fwd.dist, gold, lambda)?;
        grad_logits.data.iter_mut().for_each(|g| *g *= scale);
        self.backward_into(&fwd, &grad_logits, grads)?;
        Ok(loss)
    }
}

/// Per-token cross-entropies `−log p(y_i | x_i)`.
pub fn token_cross_entropy(dist: &LabelDistribution, gold: &[BioesLabel]) -> Result<Vec<f64>> {
    if dist.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} label rows for {} gold labels",
            dist.len(),
            gold.len()
        )));
    }
    Ok(gold
        .iter()
        .enumerate()
        .map(|(i, y)| -dist.log_probs.get(i, y.index()))
        .collect())
}

/// Mean token cross-entropy plus `lambda` times the largest token
/// cross-entropy, with its gradient with respect to the logits.
///
/// The max term's gradient flows only to the first token attaining it.
pub fn detection_loss(dist: &LabelDistribution, gold: &[BioesLabel], lambda: f64) -> Result<(f64, Matrix)> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("max-loss weight {lambda} must be >= 0")));
    }
    let ce = token_cross_entropy(dist, gold)?;
    let len = ce.len();
    let mut grad = Matrix::zeros(len, NUM_LABELS);
    if len == 0 {
        return Ok((0.0, grad));
    }
    let mut arg = 0;
    for (i, c) in ce.iter().enumerate() {
        if *c > ce[arg] {
            arg = i;
        }
    }
    let loss = ce.iter().sum::<f64>() / len as f64 + lambda * ce[arg];
    for (i, label) in gold.iter().enumerate() {
        let weight = 1.0 / len as f64 + if i == arg { lambda } else { 0.0 };
        let row = grad.row_mut(i);
        for (k, g) in row.iter_mut().enumerate() {
            let target = if k == label.index() { 1.0 } else { 0.0 };
            *g = weight * (dist.probs.get(i, k) - target);
        }
    }
    Ok((loss, grad))
}

/// BIOES gold labels of a sentence (types ignored).
pub fn gold_labels(seq: &LabeledSequence) -> Result<Vec<BioesLabel>> {
    bioes_encode(&seq.untyped_spans(), seq.len())
}

/// Sequence-labeling loss over an episode split, averaged over sentences.
#[derive(Debug, Clone)]
pub struct DetectionTask {
    pub vocab: HashVocab,
    /// Weight of the max term on support data (and conventional training).
    pub lambda_train: f64,
    /// Weight of the max term on query data.
    pub lambda_query: f64,
    /// Apply dropout while computing training losses.
    pub dropout: bool,
}

impl DetectionTask {
    pub fn new(vocab: HashVocab) -> Self {
        DetectionTask {
            vocab,
            lambda_train: DEFAULT_LAMBDA_TRAIN,
            lambda_query: DEFAULT_LAMBDA_QUERY,
            dropout: true,
        }
    }

    pub fn sentences_loss(
        &self,
        params: &DetectorParams,
        sentences: &[&LabeledSequence],
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(f64, DetectorParams)> {
        let mut grads = params.zeros_like();
        if sentences.is_empty() {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / sentences.len() as f64;
        let mut total = 0.0;
        for seq in sentences {
            let ids = self.vocab.ids(&seq.tokens);
            let gold = gold_labels(seq)?;
            let rng = if self.dropout { Some(&mut *rng) } else { None };
            total += params.sentence_loss_into(&ids, &gold, lambda, scale, rng, &mut grads)?;
        }
        Ok((total * scale, grads))
    }
}

impl TaskLoss<DetectorParams> for DetectionTask {
    fn loss_and_grad(
        &self,
        params: &DetectorParams,
        episode: &Episode,
        split: Split,
        rng: &mut Rng,
    ) -> Result<(f64, DetectorParams)> {
        let (sentences, lambda): (Vec<&LabeledSequence>, f64) = match split {
            Split::Support => (episode.support.iter().collect(), self.lambda_train),
            Split::Query => (episode.query.iter().collect(), self.lambda_query),
            Split::All => (
                episode.support.iter().chain(&episode.query).collect(),
                self.lambda_train,
            ),
        };
        self.sentences_loss(params, &sentences, lambda, rng)
    }
}
