//! Constraint-only Viterbi decoding over BIOES labels.
//!
//! No transition scores are learned: a transition either obeys the tagging
//! scheme (score 0) or is forbidden. The decoder maximizes the sum of
//! per-token log-probabilities over scheme-valid sequences.

use crate::bioes::{BioesLabel, NUM_LABELS};
use crate::matrix::Matrix;

/// Best scheme-valid label sequence for an `L × 5` log-probability matrix.
///
/// Ties resolve to the lowest canonical label index, both at each
/// backpointer and for the final label.
pub fn viterbi_decode(log_probs: &Matrix) -> Vec<BioesLabel> {
    assert_eq!(log_probs.cols, NUM_LABELS, "expected one column per BIOES label");
    let len = log_probs.rows;
    if len == 0 {
        return Vec::new();
    }
    let labels = BioesLabel::ALL;
    let mut score = [f64::NEG_INFINITY; NUM_LABELS];
    for l in labels.iter().filter(|l| l.can_start()) {
        score[l.index()] = log_probs.get(0, l.index());
    }
    let mut back = vec![[0usize; NUM_LABELS]; len];
    for (t, back_t) in back.iter_mut().enumerate().skip(1) {
        let mut next = [f64::NEG_INFINITY; NUM_LABELS];
        for cur in labels {
            let mut best = f64::NEG_INFINITY;
            let mut arg = usize::MAX;
            for prev in labels {
                if !prev.can_precede(cur) || score[prev.index()] == f64::NEG_INFINITY {
                    continue;
                }
                // strict comparison keeps the lowest index on ties
                if arg == usize::MAX || score[prev.index()] > best {
                    best = score[prev.index()];
                    arg = prev.index();
                }
            }
            if arg != usize::MAX {
                next[cur.index()] = best + log_probs.get(t, cur.index());
                back_t[cur.index()] = arg;
            }
        }
        score = next;
    }
    let mut last = usize::MAX;
    for l in labels.iter().filter(|l| l.can_end()) {
        if score[l.index()] == f64::NEG_INFINITY {
            continue;
        }
        if last == usize::MAX || score[l.index()] > score[last] {
            last = l.index();
        }
    }
    // A length-L sequence of O is always feasible for finite inputs.
    assert!(last != usize::MAX, "no feasible label sequence");
    let mut out = vec![BioesLabel::O; len];
    let mut cur = last;
    for t in (0..len).rev() {
        out[t] = labels[cur];
        cur = back[t][cur];
    }
    out
}
