//! Episodic few-shot data: labeled sentences, typed spans, N-way K-shot
//! episodes and episode sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tag used for tokens outside every entity.
pub const OUTSIDE: &str = "O";

/// An untyped token interval `[start, end]`, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

/// A token interval carrying exactly one entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypedSpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl TypedSpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        TypedSpan {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Converts per-token type tags (`"O"` for non-entities) to spans: every
/// maximal run of identical non-`O` tags becomes one span.
pub fn spans_from_tags<S: AsRef<str>>(tags: &[S]) -> Vec<TypedSpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let tag = tags[i].as_ref();
        if tag == OUTSIDE {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < tags.len() && tags[i + 1].as_ref() == tag {
            i += 1;
        }
        spans.push(TypedSpan::new(start, i, tag));
        i += 1;
    }
    spans
}

/// Inverse of [`spans_from_tags`]. Two adjacent spans of the same type are
/// not distinguishable in tag form and merge on the way back.
pub fn tags_from_spans(spans: &[TypedSpan], len: usize) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for s in spans {
        for t in &mut tags[s.start..=s.end.min(len.saturating_sub(1))] {
            t.clone_from(&s.entity_type);
        }
    }
    tags
}

/// A tokenized sentence with its (possibly empty) gold or predicted spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<String>,
    pub spans: Vec<TypedSpan>,
}

impl LabeledSequence {
    /// Validating constructor; spans are stored sorted by start.
    pub fn new(tokens: Vec<String>, mut spans: Vec<TypedSpan>) -> Result<Self> {
        spans.sort();
        let seq = LabeledSequence { tokens, spans };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_tags<S: AsRef<str>>(tokens: Vec<String>, tags: &[S]) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Validation(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        LabeledSequence::new(tokens, spans_from_tags(tags))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> Vec<String> {
        tags_from_spans(&self.spans, self.tokens.len())
    }

    pub fn untyped_spans(&self) -> Vec<Span> {
        self.spans.iter().map(TypedSpan::span).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation("sentence has no tokens".into()));
        }
        let len = self.tokens.len();
        for s in &self.spans {
            if s.start > s.end || s.end >= len {
                return Err(Error::Validation(format!(
                    "span [{},{}] outside sentence of length {len}",
                    s.start, s.end
                )));
            }
            if s.entity_type.is_empty() || s.entity_type == OUTSIDE {
                return Err(Error::Validation(format!(
                    "span [{},{}] has no entity type",
                    s.start, s.end
                )));
            }
        }
        let mut sorted: Vec<&TypedSpan> = self.spans.iter().collect();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0].span().overlaps(&w[1].span()) {
                return Err(Error::Validation(format!(
                    "overlapping spans [{},{}] and [{},{}] in sentence `{}`",
                    w[0].start,
                    w[0].end,
                    w[1].start,
                    w[1].end,
                    self.tokens.join(" ")
                )));
            }
        }
        Ok(())
    }
}

/// One N-way K-shot task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<LabeledSequence>,
    pub query: Vec<LabeledSequence>,
    pub types: Vec<String>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.types.len()
    }

    /// Number of support spans of `entity_type`.
    pub fn support_count(&self, entity_type: &str) -> usize {
        self.support
            .iter()
            .flat_map(|s| &s.spans)
            .filter(|s| s.entity_type == entity_type)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::Validation("episode declares no entity types".into()));
        }
        let declared: BTreeSet<&str> = self.types.iter().map(String::as_str).collect();
        if declared.len() != self.types.len() {
            return Err(Error::Validation("episode declares a type twice".into()));
        }
        for (part, seqs) in [("support", &self.support), ("query", &self.query)] {
            for (i, seq) in seqs.iter().enumerate() {
                seq.validate().map_err(|e| e.context(format!("{part} sentence {i}")))?;
                if let Some(bad) = seq.spans.iter().find(|s| !declared.contains(s.entity_type.as_str())) {
                    return Err(Error::Validation(format!(
                        "{part} sentence {i}: type `{}` not in declared types {:?}",
                        bad.entity_type, self.types
                    )));
                }
            }
        }
        for t in &self.types {
            if self.support_count(t) == 0 {
                return Err(Error::Validation(format!("type `{t}` has no support span")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "dev" | "valid" | "validation" => Ok(SplitTag::Dev),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Config(format!("unknown split tag `{other}`"))),
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Dev => "dev",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSet {
    pub episodes: Vec<Episode>,
    pub split_tag: SplitTag,
}

impl EpisodeSet {
    pub fn new(split_tag: SplitTag) -> Self {
        EpisodeSet {
            episodes: Vec::new(),
            split_tag,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Union of every episode's declared types.
    pub fn type_union(&self) -> BTreeSet<String> {
        self.episodes.iter().flat_map(|e| e.types.iter().cloned()).collect()
    }
}

/// Rejects a train/test pairing whose type vocabularies intersect.
pub fn check_disjoint_types(train: &EpisodeSet, test: &EpisodeSet) -> Result<()> {
    let train_types = train.type_union();
    let test_types = test.type_union();
    let shared: Vec<&String> = train_types.intersection(&test_types).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "{} and {} splits share entity types {:?}",
            train.split_tag, test.split_tag, shared
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn spans_from_tags_examples() {
        assert!(spans_from_tags(&["O", "O", "O"]).is_empty());
        assert_eq!(
            spans_from_tags(&["A", "A", "O", "B"]),
            vec![TypedSpan::new(0, 1, "A"), TypedSpan::new(3, 3, "B")]
        );
        assert_eq!(
            spans_from_tags(&["A", "B", "B"]),
            vec![TypedSpan::new(0, 0, "A"), TypedSpan::new(1, 2, "B")]
        );
    }

    #[test]
    fn overlapping_spans_rejected() {
        let err = LabeledSequence::new(
            toks("a b c"),
            vec![TypedSpan::new(0, 1, "X"), TypedSpan::new(1, 2, "Y")],
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlapping"));
    }

    #[test]
    fn episode_requires_declared_types() {
        let s = LabeledSequence::from_tags(toks("Jack Gordon is"), &["p", "p", "O"]).unwrap();
        let mut ep = Episode {
            support: vec![s.clone()],
            query: vec![s],
            types: vec!["q".into()],
        };
        assert!(ep.validate().is_err());
        ep.types = vec!["p".into()];
        ep.validate().unwrap();
    }

    #[test]
    fn disjointness_checked() {
        let s = LabeledSequence::from_tags(toks("x"), &["a"]).unwrap();
        let ep = |t: &str| Episode {
            support: vec![LabeledSequence::from_tags(toks("x"), &[t]).unwrap()],
            query: vec![s.clone()],
            types: vec![t.to_string()],
        };
        let mut train = EpisodeSet::new(SplitTag::Train);
        train.episodes.push(ep("a"));
        let mut test = EpisodeSet::new(SplitTag::Test);
        test.episodes.push(ep("b"));
        check_disjoint_types(&train, &test).unwrap();
        test.episodes.push(ep("a"));
        assert!(check_disjoint_types(&train, &test).is_err());
    }
}
