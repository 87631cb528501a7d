//! Greedy N-way K~2K-shot episode sampling from a labeled corpus.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::encoder::rng_from_seed;
use crate::episode::{Episode, EpisodeSet, LabeledSequence, SplitTag};
use crate::error::{Error, Result};

/// Attempts per episode before giving up with a capacity error.
pub const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    /// Per-type span target for the query set (same K~2K rule).
    pub query_shots: usize,
}

/// Samples `n_episodes` episodes. Each episode draws `n_way` types, then
/// greedily adds sentences (only those whose spans all carry chosen types)
/// while every per-type count stays at most `2K`, until each type has at
/// least `K` spans; the query set is filled the same way from the remaining
/// sentences. Deterministic in `seed`.
pub fn sample_episodes(
    corpus: &[LabeledSequence],
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
    split_tag: SplitTag,
) -> Result<EpisodeSet> {
    if shape.n_way == 0 || shape.k_shot == 0 || shape.query_shots == 0 {
        return Err(Error::Config("N, K and query shots must be >= 1".into()));
    }
    // Sentences indexed by the set of types they contain.
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        let types: BTreeSet<&str> = s.spans.iter().map(|sp| sp.entity_type.as_str()).collect();
        for t in types {
            by_type.entry(t).or_default().push(i);
        }
    }
    let all_types: Vec<&str> = by_type.keys().copied().collect();
    if all_types.len() < shape.n_way {
        return Err(Error::Capacity(format!(
            "{} entity types available, {} requested",
            all_types.len(),
            shape.n_way
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut set = EpisodeSet::new(split_tag);
    for e in 0..n_episodes {
        let mut attempt = 0;
        let episode = loop {
            if attempt == MAX_RETRIES {
                return Err(Error::Capacity(format!(
                    "could not fill episode {e} with shape {shape:?} after {MAX_RETRIES} attempts"
                )));
            }
            attempt += 1;
            let mut chosen: Vec<&str> = all_types.choose_multiple(&mut rng, shape.n_way).copied().collect();
            chosen.sort_unstable();
            let allowed: BTreeSet<&str> = chosen.iter().copied().collect();
            let mut candidates: Vec<usize> = chosen
                .iter()
                .flat_map(|t| by_type[t].iter().copied())
                .collect::<BTreeSet<usize>>()
                .into_iter()
                .filter(|&i| {
                    corpus[i]
                        .spans
                        .iter()
                        .all(|sp| allowed.contains(sp.entity_type.as_str()))
                })
                .collect();
            candidates.shuffle(&mut rng);
            let Some(support) = greedy_fill(corpus, &candidates, &chosen, shape.k_shot) else {
                continue;
            };
            let rest: Vec<usize> = candidates.iter().copied().filter(|i| !support.contains(i)).collect();
            let Some(query) = greedy_fill(corpus, &rest, &chosen, shape.query_shots) else {
                continue;
            };
            break Episode {
                support: support.iter().map(|&i| corpus[i].clone()).collect(),
                query: query.iter().map(|&i| corpus[i].clone()).collect(),
                types: chosen.iter().map(|t| t.to_string()).collect(),
            };
        };
        set.episodes.push(episode);
    }
    Ok(set)
}

fn greedy_fill(corpus: &[LabeledSequence], candidates: &[usize], types: &[&str], k: usize) -> Option<Vec<usize>> {
    let mut counts: BTreeMap<&str, usize> = types.iter().map(|t| (*t, 0)).collect();
    let mut picked = Vec::new();
    for &i in candidates {
        if counts.values().all(|&c| c >= k) {
            break;
        }
        let mut add: BTreeMap<&str, usize> = BTreeMap::new();
        for sp in &corpus[i].spans {
            *add.entry(sp.entity_type.as_str()).or_default() += 1;
        }
        let helps = add.keys().any(|t| counts[t] < k);
        let fits = add.iter().all(|(t, n)| counts[t] + n <= 2 * k);
        if helps && fits {
            for (t, n) in add {
                *counts.get_mut(t).unwrap() += n;
            }
            picked.push(i);
        }
    }
    counts.values().all(|&c| c >= k).then_some(picked)
}
