//! Prototype-based entity typing over detected spans and its MAML-enhanced
//! variant.
//!
//! A span is represented by the mean of its token representations; a class
//! prototype is the mean representation of that class's support spans; a
//! span is typed by a softmax over negative distances to the prototypes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderOutput, EncoderParams, EncoderTrace, Rng, TokenEncoder};
use crate::episode::{Episode, LabeledSequence, Span};
use crate::error::{Error, Result};
use crate::maml::{inner_update, AdaptedParams, MetaLearner, Split, TaskLoss};
use crate::matrix::{log_softmax, Matrix};
use crate::optim::OptimizerConfig;
use crate::params::{Buffer, ParamSet};
use crate::vocab::HashVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TyperParams {
    pub encoder: EncoderParams,
}

impl TyperParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(TyperParams {
            encoder: EncoderParams::init(config, seed)?,
        })
    }
}

impl ParamSet for TyperParams {
    fn buffers(&self) -> Vec<&Buffer> {
        self.encoder.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.encoder.buffers_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
    NegativeDot,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_euclidean" => Ok(Distance::SquaredEuclidean),
            "euclidean" => Ok(Distance::Euclidean),
            "negative_dot" => Ok(Distance::NegativeDot),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

impl Distance {
    pub fn eval(self, proto: &[f64], span: &[f64]) -> f64 {
        match self {
            Distance::SquaredEuclidean => sq_dist(proto, span),
            Distance::Euclidean => sq_dist(proto, span).sqrt(),
            Distance::NegativeDot => -proto.iter().zip(span).map(|(a, b)| a * b).sum::<f64>(),
        }
    }

    /// Adds `upstream · ∂d/∂proto` and `upstream · ∂d/∂span` into the outputs.
    fn backprop(self, proto: &[f64], span: &[f64], upstream: f64, d_proto: &mut [f64], d_span: &mut [f64]) {
        match self {
            Distance::SquaredEuclidean => {
                for i in 0..proto.len() {
                    let g = 2.0 * (proto[i] - span[i]) * upstream;
                    d_proto[i] += g;
                    d_span[i] -= g;
                }
            }
            Distance::Euclidean => {
                let d = sq_dist(proto, span).sqrt();
                if d == 0.0 {
                    return;
                }
                for i in 0..proto.len() {
                    let g = (proto[i] - span[i]) / d * upstream;
                    d_proto[i] += g;
                    d_span[i] -= g;
                }
            }
            Distance::NegativeDot => {
                for i in 0..proto.len() {
                    d_proto[i] -= span[i] * upstream;
                    d_span[i] -= proto[i] * upstream;
                }
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean-pooled representation of a span.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanRepresentation {
    pub vector: Vec<f64>,
    pub sentence: usize,
    pub span: Span,
}

/// Mean of rows `start..=end` of `h`.
pub fn span_representation(h: &Matrix, span: Span) -> Result<Vec<f64>> {
    if span.start > span.end || span.end >= h.rows {
        return Err(Error::Validation(format!(
            "span {span} outside sentence of length {}",
            h.rows
        )));
    }
    let mut s = vec![0.0; h.cols];
    for r in span.start..=span.end {
        for (a, b) in s.iter_mut().zip(h.row(r)) {
            *a += b;
        }
    }
    let n = span.len() as f64;
    s.iter_mut().for_each(|x| *x /= n);
    Ok(s)
}

/// One prototype per episode type, in the episode's declared type order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub types: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// Support spans contributing to each prototype.
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, entity_type: &str) -> Option<&[f64]> {
        self.types
            .iter()
            .position(|t| t == entity_type)
            .map(|i| self.vectors[i].as_slice())
    }
}

/// Probability of each prototype's type for span vector `s`:
/// `softmax(−d(c_k, s))`, evaluated in log space.
pub fn typing_distribution(s: &[f64], protos: &PrototypeSet, distance: Distance) -> Vec<f64> {
    let neg: Vec<f64> = protos.vectors.iter().map(|c| -distance.eval(c, s)).collect();
    log_softmax(&neg).into_iter().map(f64::exp).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypingDecision {
    pub span: Span,
    pub predicted_type: String,
    /// Probability per episode type, in declared order.
    pub probabilities: Vec<f64>,
    /// `−d` to the nearest prototype.
    pub similarity: f64,
}

/// Index of the maximum, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Types every span vector. When `min_similarity` is set, spans whose
/// similarity to the nearest prototype is not greater than it are dropped.
pub fn classify_vectors(
    reps: &[(Span, Vec<f64>)],
    protos: &PrototypeSet,
    distance: Distance,
    min_similarity: Option<f64>,
) -> Vec<TypingDecision> {
    reps.iter()
        .filter_map(|(span, s)| {
            let neg: Vec<f64> = protos.vectors.iter().map(|c| -distance.eval(c, s)).collect();
            let similarity = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if matches!(min_similarity, Some(t) if similarity <= t) {
                return None;
            }
            let probabilities: Vec<f64> = log_softmax(&neg).into_iter().map(f64::exp).collect();
            let k = argmax(&probabilities);
            Some(TypingDecision {
                span: *span,
                predicted_type: protos.types[k].clone(),
                probabilities,
                similarity,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypingOptions {
    pub distance: Distance,
    /// Exclude a support span from its own prototype when it is scored as a
    /// query item during support-set adaptation.
    pub leave_one_out: bool,
    pub min_similarity: Option<f64>,
}

impl Default for TypingOptions {
    fn default() -> Self {
        TypingOptions {
            distance: Distance::SquaredEuclidean,
            leave_one_out: false,
            min_similarity: None,
        }
    }
}

/// Prototype-network loss and inference bound to a vocabulary.
#[derive(Debug, Clone)]
pub struct TypingTask {
    pub vocab: HashVocab,
    pub options: TypingOptions,
    /// Apply dropout while computing training losses.
    pub dropout: bool,
}

struct Encoded {
    output: EncoderOutput,
    trace: EncoderTrace,
}

struct SpanItem {
    sentence: usize,
    span: Span,
    class: usize,
}

impl TypingTask {
    pub fn new(vocab: HashVocab, options: TypingOptions) -> Self {
        TypingTask {
            vocab,
            options,
            dropout: true,
        }
    }

    fn encode(
        &self,
        params: &TyperParams,
        sentences: &[&LabeledSequence],
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<Encoded>> {
        sentences
            .iter()
            .map(|s| {
                let ids = self.vocab.ids(&s.tokens);
                let (output, trace) = params.encoder.encode(&ids, rng.as_deref_mut())?;
                Ok(Encoded { output, trace })
            })
            .collect()
    }

    fn items(sentences: &[&LabeledSequence], offset: usize, types: &[String]) -> Result<Vec<SpanItem>> {
        let mut items = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            for sp in &s.spans {
                let class = types.iter().position(|t| *t == sp.entity_type).ok_or_else(|| {
                    Error::Validation(format!(
                        "gold type `{}` has no prototype among {types:?}",
                        sp.entity_type
                    ))
                })?;
                items.push(SpanItem {
                    sentence: offset + i,
                    span: sp.span(),
                    class,
                });
            }
        }
        Ok(items)
    }

    /// Eval-mode prototypes from an episode's support set.
    pub fn compute_prototypes(
        &self,
        params: &TyperParams,
        support: &[LabeledSequence],
        types: &[String],
    ) -> Result<PrototypeSet> {
        let refs: Vec<&LabeledSequence> = support.iter().collect();
        let encoded = self.encode(params, &refs, None)?;
        let items = Self::items(&refs, 0, types)?;
        let reps = items
            .iter()
            .map(|it| span_representation(&encoded[it.sentence].output.h, it.span))
            .collect::<Result<Vec<_>>>()?;
        prototypes_from(&items, &reps, types, params.encoder.d_model())
    }

    /// Eval-mode representations of the given spans of one sentence.
    pub fn span_vectors(
        &self,
        params: &TyperParams,
        tokens: &[String],
        spans: &[Span],
    ) -> Result<Vec<(Span, Vec<f64>)>> {
        let ids = self.vocab.ids(tokens);
        let (out, _) = params.encoder.encode(&ids, None)?;
        spans
            .iter()
            .map(|s| Ok((*s, span_representation(&out.h, *s)?)))
            .collect()
    }

    /// Types detected spans of one sentence.
    pub fn classify_spans(
        &self,
        params: &TyperParams,
        protos: &PrototypeSet,
        tokens: &[String],
        spans: &[Span],
    ) -> Result<Vec<TypingDecision>> {
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let reps = self.span_vectors(params, tokens, spans)?;
        Ok(classify_vectors(
            &reps,
            protos,
            self.options.distance,
            self.options.min_similarity,
        ))
    }

    /// Summed cross-entropy of query spans against support prototypes, with
    /// gradients flowing through both. `query = None` scores every support
    /// span against the prototypes it helped build.
    pub fn typing_loss(
        &self,
        params: &TyperParams,
        support: &[LabeledSequence],
        query: Option<&[LabeledSequence]>,
        types: &[String],
        rng: Option<&mut Rng>,
    ) -> Result<(f64, TyperParams)> {
        let mut sentences: Vec<&LabeledSequence> = support.iter().collect();
        let n_support = sentences.len();
        if let Some(q) = query {
            sentences.extend(q.iter());
        }
        let rng = if self.dropout { rng } else { None };
        let encoded = self.encode(params, &sentences, rng)?;
        let support_items = Self::items(&sentences[..n_support], 0, types)?;
        let (query_items, self_query) = match query {
            Some(_) => (Self::items(&sentences[n_support..], n_support, types)?, false),
            None => (Vec::new(), true),
        };
        let d = params.encoder.d_model();
        let support_reps = support_items
            .iter()
            .map(|it| span_representation(&encoded[it.sentence].output.h, it.span))
            .collect::<Result<Vec<_>>>()?;
        let protos = prototypes_from(&support_items, &support_reps, types, d)?;
        let query_reps = query_items
            .iter()
            .map(|it| span_representation(&encoded[it.sentence].output.h, it.span))
            .collect::<Result<Vec<_>>>()?;

        let n_types = types.len();
        let distance = self.options.distance;
        let mut grad_support = vec![vec![0.0; d]; support_items.len()];
        let mut grad_query = vec![vec![0.0; d]; query_items.len()];
        let mut grad_protos = vec![vec![0.0; d]; n_types];
        let mut total = 0.0;

        let n_items = if self_query {
            support_items.len()
        } else {
            query_items.len()
        };
        for q in 0..n_items {
            let (item, rep) = if self_query {
                (&support_items[q], &support_reps[q])
            } else {
                (&query_items[q], &query_reps[q])
            };
            // Leave-one-out prototype for the item's own class, when enabled.
            let loo = self_query && self.options.leave_one_out && protos.counts[item.class] > 1;
            let own = if loo {
                let n = protos.counts[item.class] as f64;
                protos.vectors[item.class]
                    .iter()
                    .zip(rep)
                    .map(|(c, s)| (n * c - s) / (n - 1.0))
                    .collect::<Vec<f64>>()
            } else {
                protos.vectors[item.class].clone()
            };
            let proto_of = |k: usize| -> &[f64] {
                if k == item.class {
                    &own
                } else {
                    &protos.vectors[k]
                }
            };
            let neg: Vec<f64> = (0..n_types).map(|k| -distance.eval(proto_of(k), rep)).collect();
            let logp = log_softmax(&neg);
            total -= logp[item.class];

            let mut d_rep = vec![0.0; d];
            let mut d_own = vec![0.0; d];
            for k in 0..n_types {
                // ∂(−log p_y)/∂d_k = [k = y] − p_k
                let up = if k == item.class { 1.0 } else { 0.0 } - logp[k].exp();
                if up == 0.0 {
                    continue;
                }
                let target = if k == item.class && loo {
                    &mut d_own
                } else {
                    &mut grad_protos[k]
                };
                distance.backprop(proto_of(k), rep, up, target, &mut d_rep);
            }
            if loo {
                let n = protos.counts[item.class] as f64;
                // own = (Σ_{j≠q} s_j)/(n−1)
                for (j, sit) in support_items.iter().enumerate() {
                    if sit.class == item.class && j != q {
                        for (g, v) in grad_support[j].iter_mut().zip(&d_own) {
                            *g += v / (n - 1.0);
                        }
                    }
                }
            }
            let dst = if self_query {
                &mut grad_support[q]
            } else {
                &mut grad_query[q]
            };
            for (g, v) in dst.iter_mut().zip(&d_rep) {
                *g += v;
            }
        }
        // Prototype gradients spread evenly over their support spans.
        for (j, it) in support_items.iter().enumerate() {
            let n = protos.counts[it.class] as f64;
            for (g, v) in grad_support[j].iter_mut().zip(&grad_protos[it.class]) {
                *g += v / n;
            }
        }

        let mut grad_h: Vec<Matrix> = encoded.iter().map(|e| Matrix::zeros(e.output.h.rows, d)).collect();
        let spread = |items: &[SpanItem], grads: &[Vec<f64>], grad_h: &mut [Matrix]| {
            for (it, g) in items.iter().zip(grads) {
                let n = it.span.len() as f64;
                for r in it.span.start..=it.span.end {
                    for (dst, v) in grad_h[it.sentence].row_mut(r).iter_mut().zip(g) {
                        *dst += v / n;
                    }
                }
            }
        };
        spread(&support_items, &grad_support, &mut grad_h);
        spread(&query_items, &grad_query, &mut grad_h);

        let mut grads = params.zeros_like();
        for (enc, gh) in encoded.iter().zip(&grad_h) {
            params.encoder.backward_into(&enc.trace, gh, &mut grads.encoder)?;
        }
        Ok((total, grads))
    }

    /// Adapted typer: `steps` updates of the support-as-query loss.
    pub fn proto_inner_update(
        &self,
        params: &TyperParams,
        episode: &Episode,
        steps: usize,
        optimizer: OptimizerConfig,
        rng: &mut Rng,
    ) -> Result<AdaptedParams<TyperParams>> {
        inner_update(params, self, episode, steps, optimizer, rng)
    }

    /// One meta-update of the typer over a batch of episodes.
    pub fn proto_meta_step(
        &self,
        learner: &mut MetaLearner<TyperParams>,
        params: &mut TyperParams,
        batch: &[(usize, &Episode)],
    ) -> Result<f64> {
        learner.meta_step(params, batch, self)
    }

    /// Fine-tunes on the support set of a novel episode, rebuilds prototypes
    /// with the adapted encoder and types the detected spans of every query
    /// sentence. The meta-parameters are not modified.
    pub fn meta_test_typing(
        &self,
        meta_params: &TyperParams,
        episode: &Episode,
        detected: &[Vec<Span>],
        steps: usize,
        optimizer: OptimizerConfig,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<TypingDecision>>> {
        if detected.len() != episode.query.len() {
            return Err(Error::Shape(format!(
                "{} detected span lists for {} query sentences",
                detected.len(),
                episode.query.len()
            )));
        }
        if detected.iter().all(Vec::is_empty) {
            return Ok(vec![Vec::new(); detected.len()]);
        }
        let adapted = self.proto_inner_update(meta_params, episode, steps, optimizer, rng)?;
        let protos = self.compute_prototypes(&adapted.params, &episode.support, &episode.types)?;
        episode
            .query
            .iter()
            .zip(detected)
            .map(|(q, spans)| self.classify_spans(&adapted.params, &protos, &q.tokens, spans))
            .collect()
    }
}

fn prototypes_from(items: &[SpanItem], reps: &[Vec<f64>], types: &[String], d: usize) -> Result<PrototypeSet> {
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); types.len()];
    for (it, rep) in items.iter().zip(reps) {
        members[it.class].push(rep);
    }
    let mut vectors = vec![vec![0.0; d]; types.len()];
    let mut counts = vec![0usize; types.len()];
    for (k, group) in members.iter_mut().enumerate() {
        // Summing in a canonical order makes the prototype independent of
        // support order, bit for bit.
        group.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        counts[k] = group.len();
        for rep in group.iter() {
            for (a, b) in vectors[k].iter_mut().zip(rep.iter()) {
                *a += b;
            }
        }
    }
    for (k, t) in types.iter().enumerate() {
        if counts[k] == 0 {
            return Err(Error::Validation(format!("type `{t}` has no support span")));
        }
        let n = counts[k] as f64;
        vectors[k].iter_mut().for_each(|x| *x /= n);
    }
    Ok(PrototypeSet {
        types: types.to_vec(),
        vectors,
        counts,
    })
}

impl TaskLoss<TyperParams> for TypingTask {
    fn loss_and_grad(
        &self,
        params: &TyperParams,
        episode: &Episode,
        split: Split,
        rng: &mut Rng,
    ) -> Result<(f64, TyperParams)> {
        match split {
            Split::Support => self.typing_loss(params, &episode.support, None, &episode.types, Some(rng)),
            Split::Query | Split::All => self.typing_loss(
                params,
                &episode.support,
                Some(&episode.query),
                &episode.types,
                Some(rng),
            ),
        }
    }
}

impl fmt::Display for TypingDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ({:.3})", self.span, self.predicted_type, self.similarity)
    }
}
