//! Synthetic typed-entity documents for desk-scale transfer experiments.
//!
//! All tokens come from one shared word pool. A document assigns a few pool
//! words to each of its types as entity names and a few more as trigger
//! words; every mention is a trigger followed by a name. Inside the
//! document those words play only their assigned role, while elsewhere
//! they are ordinary words. Which words form entities is therefore a
//! property of the document and has to be learned from its own examples,
//! which is exactly the situation of a novel entity type. Sampling an
//! episode from one document yields support and query sets that share
//! names and triggers.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{rng_from_seed, Rng};
use crate::episode::{EpisodeSet, LabeledSequence, SplitTag, TypedSpan};
use crate::error::Result;
use crate::sampler::{sample_episodes, EpisodeShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_types: usize,
    /// Pool words acting as entity names of each type within one document.
    pub names_per_type: usize,
    /// Pool words introducing each type's mentions within one document.
    pub triggers_per_type: usize,
    /// Size of the shared word pool.
    pub filler_pool: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_mention_len: usize,
    pub max_mentions: usize,
    /// Sentences per type within one document.
    pub sentences_per_type: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_types: 12,
            names_per_type: 2,
            triggers_per_type: 2,
            filler_pool: 400,
            min_len: 6,
            max_len: 12,
            max_mention_len: 1,
            max_mentions: 2,
            sentences_per_type: 5,
        }
    }
}

pub fn type_name(k: usize) -> String {
    format!("type{k:02}")
}

/// Generates one document over `types` (indices into `0..n_types`),
/// deterministic in `(seed, doc_id)`. Sentences mention a single type.
pub fn generate_document(cfg: &SyntheticConfig, types: &[usize], doc_id: usize, seed: u64) -> Vec<LabeledSequence> {
    let mut rng = rng_from_seed(seed ^ (doc_id as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let per_type = cfg.names_per_type + cfg.triggers_per_type;
    let n_reserved = types.len() * per_type;
    assert!(
        n_reserved < cfg.filler_pool,
        "word pool too small for the document's roles"
    );
    let picked = rand::seq::index::sample(&mut rng, cfg.filler_pool, n_reserved).into_vec();
    let reserved: HashSet<usize> = picked.iter().copied().collect();
    let filler = |rng: &mut Rng| loop {
        let w = rng.gen_range(0..cfg.filler_pool);
        if !reserved.contains(&w) {
            break format!("w{w}");
        }
    };
    let mut doc = Vec::with_capacity(types.len() * cfg.sentences_per_type);
    for (ti, &k) in types.iter().enumerate() {
        let ty = type_name(k);
        let own = &picked[ti * per_type..(ti + 1) * per_type];
        let (names, triggers) = own.split_at(cfg.names_per_type);
        for _ in 0..cfg.sentences_per_type {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut remaining = rng.gen_range(1..=cfg.max_mentions);
            let mut tokens: Vec<String> = Vec::with_capacity(len + 8);
            let mut spans = Vec::new();
            while tokens.len() < len || remaining > 0 {
                let slots_left = len.saturating_sub(tokens.len());
                if remaining > 0 && (slots_left <= remaining * 3 || rng.gen_bool(0.25)) {
                    tokens.push(format!("w{}", triggers[rng.gen_range(0..triggers.len())]));
                    let start = tokens.len();
                    for _ in 0..rng.gen_range(1..=cfg.max_mention_len) {
                        tokens.push(format!("w{}", names[rng.gen_range(0..names.len())]));
                    }
                    spans.push(TypedSpan::new(start, tokens.len() - 1, ty.clone()));
                    remaining -= 1;
                }
                // Every mention is followed by at least one ordinary word.
                tokens.push(filler(&mut rng));
            }
            doc.push(LabeledSequence::new(tokens, spans).expect("generator emits valid spans"));
        }
    }
    doc
}

/// Samples one episode from each of `n_docs` fresh documents over `types`.
/// Document ids start at `first_doc`, so disjoint ranges never share names.
pub fn document_episodes(
    cfg: &SyntheticConfig,
    types: &[usize],
    shape: EpisodeShape,
    first_doc: usize,
    n_docs: usize,
    seed: u64,
    split_tag: SplitTag,
) -> Result<EpisodeSet> {
    let mut set = EpisodeSet::new(split_tag);
    for d in first_doc..first_doc + n_docs {
        let doc = generate_document(cfg, types, d, seed);
        let mut one = sample_episodes(&doc, shape, 1, seed.wrapping_add(d as u64), split_tag)?;
        set.episodes.append(&mut one.episodes);
    }
    Ok(set)
}
