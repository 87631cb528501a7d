//! BIOES tagging for class-agnostic span detection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::episode::Span;
use crate::error::{Error, Result};

/// Boundary label. The discriminant is the canonical index used by the
/// classification head and the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BioesLabel {
    O = 0,
    B = 1,
    I = 2,
    E = 3,
    S = 4,
}

pub const NUM_LABELS: usize = 5;

impl BioesLabel {
    pub const ALL: [BioesLabel; NUM_LABELS] = [
        BioesLabel::O,
        BioesLabel::B,
        BioesLabel::I,
        BioesLabel::E,
        BioesLabel::S,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn can_start(self) -> bool {
        matches!(self, BioesLabel::O | BioesLabel::B | BioesLabel::S)
    }

    pub fn can_end(self) -> bool {
        matches!(self, BioesLabel::O | BioesLabel::E | BioesLabel::S)
    }

    /// Whether `self` may be immediately followed by `next`.
    pub fn can_precede(self, next: BioesLabel) -> bool {
        use BioesLabel::*;
        match self {
            B | I => matches!(next, I | E),
            O | E | S => matches!(next, O | B | S),
        }
    }
}

impl fmt::Display for BioesLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Whether a whole label sequence obeys the scheme.
pub fn is_valid_sequence(labels: &[BioesLabel]) -> bool {
    match (labels.first(), labels.last()) {
        (None, None) => true,
        (Some(first), Some(last)) => {
            first.can_start() && last.can_end() && labels.windows(2).all(|w| w[0].can_precede(w[1]))
        }
        _ => unreachable!(),
    }
}

/// Labels a length-`len` sentence from its (untyped) spans.
pub fn bioes_encode(spans: &[Span], len: usize) -> Result<Vec<BioesLabel>> {
    let mut labels = vec![BioesLabel::O; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::Validation(format!("span {s} outside length {len}")));
        }
        if labels[s.start..=s.end].iter().any(|l| *l != BioesLabel::O) {
            return Err(Error::Validation(format!("span {s} overlaps another span")));
        }
        if s.start == s.end {
            labels[s.start] = BioesLabel::S;
        } else {
            labels[s.start] = BioesLabel::B;
            labels[s.start + 1..s.end].fill(BioesLabel::I);
            labels[s.end] = BioesLabel::E;
        }
    }
    Ok(labels)
}

/// Recovers spans from labels. Total: fragments that are not a closed
/// `B I* E` run or an `S` are dropped.
pub fn bioes_decode(labels: &[BioesLabel]) -> Vec<Span> {
    use BioesLabel::*;
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, label) in labels.iter().enumerate() {
        match label {
            O => open = None,
            S => {
                open = None;
                spans.push(Span::new(i, i));
            }
            B => open = Some(i),
            I => {}
            E => {
                if let Some(start) = open.take() {
                    spans.push(Span::new(start, i));
                }
            }
        }
    }
    spans
}
