//! Episode files: the canonical newline-delimited format plus adapters for
//! the Few-NERD and Cross-Dataset release layouts.
//!
//! Canonical layout (UTF-8, one JSON object per line):
//!
//! ```text
//! {"format_version":1,"split_tag":"train"}
//! {"support":[{"tokens":[...],"tags":[...]}],"query":[...],"types":[...]}
//! ```
//!
//! Tags are flat per-token type names (`"O"` outside entities).
//!
//! Few-NERD layout: one object per line,
//! `{"support":{"word":[[..]],"label":[[..]]},"query":{..},"types":[..]}`
//! with flat type labels.
//!
//! Cross-Dataset layout (assumed, the release schema is undocumented): a
//! single JSON object mapping domain names to lists of episodes, each
//! `{"support":{"seq_ins":[[..]],"seq_outs":[[..]]},"batch":{"seq_ins":..,"seq_outs":..}}`
//! with `B-`/`I-` prefixed tags. The declared type set is the sorted set of
//! types in the support part. Any other layout is rejected.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::episode::{Episode, EpisodeSet, LabeledSequence, SplitTag, TypedSpan, OUTSIDE};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeFormat {
    FewNerd,
    CrossDataset,
    Canonical,
}

impl std::str::FromStr for EpisodeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewnerd" => Ok(EpisodeFormat::FewNerd),
            "crossdataset" => Ok(EpisodeFormat::CrossDataset),
            "canonical" => Ok(EpisodeFormat::Canonical),
            other => Err(Error::Config(format!("unknown episode format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: EpisodeFormat,
    /// Validation failures abort the load instead of skipping the episode.
    pub strict: bool,
    /// Split tag for formats that do not record one (and for empty files).
    pub split_tag: SplitTag,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            format: EpisodeFormat::Canonical,
            strict: true,
            split_tag: SplitTag::Test,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    split_tag: SplitTag,
}

#[derive(Serialize)]
struct SentenceRecord<'a> {
    tokens: &'a [String],
    tags: Vec<String>,
}

#[derive(Serialize)]
struct EpisodeRecord<'a> {
    support: Vec<SentenceRecord<'a>>,
    query: Vec<SentenceRecord<'a>>,
    types: &'a [String],
}

pub fn load_episodes(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<EpisodeSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episodes(&text, opts)
}

/// Parses episode text already in memory; see [`load_episodes`].
pub fn parse_episodes(text: &str, opts: &LoadOptions) -> Result<EpisodeSet> {
    match opts.format {
        EpisodeFormat::Canonical => parse_canonical(text, opts),
        EpisodeFormat::FewNerd => parse_fewnerd(text, opts),
        EpisodeFormat::CrossDataset => parse_crossdataset(text, opts),
    }
}

/// Reads a labeled corpus for episode sampling: one `token<TAB>tag` pair
/// per line (any whitespace separates), blank lines between sentences,
/// tags in the flat per-type form (`O` for non-entities).
pub fn parse_corpus(text: &str) -> Result<Vec<LabeledSequence>> {
    let mut corpus = Vec::new();
    let (mut tokens, mut tags) = (Vec::new(), Vec::<String>::new());
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, line: usize| -> Result<()> {
        if !tokens.is_empty() {
            let seq = LabeledSequence::from_tags(std::mem::take(tokens), tags)
                .map_err(|e| e.context(format!("sentence ending before line {line}")))?;
            tags.clear();
            corpus.push(seq);
        }
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (None, _, _) => flush(&mut tokens, &mut tags, line_no)?,
            (Some(tok), Some(tag), None) => {
                tokens.push(tok.to_string());
                tags.push(tag.to_string());
            }
            _ => return Err(Error::parse(line_no, "<line>", "expected `token tag`")),
        }
    }
    flush(&mut tokens, &mut tags, text.lines().count() + 1)?;
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| e.context(path.display().to_string()))
}

/// Writes the canonical format. The output reloads to an equal set.
pub fn save_episodes(episodes: &EpisodeSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(to_canonical_string(episodes)?.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn to_canonical_string(episodes: &EpisodeSet) -> Result<String> {
    let mut s = serde_json::to_string(&Header {
        format_version: FORMAT_VERSION,
        split_tag: episodes.split_tag,
    })
    .expect("header serializes");
    s.push('\n');
    for (i, ep) in episodes.episodes.iter().enumerate() {
        ep.validate()
            .map_err(|e| e.context(format!("episode {i} not savable")))?;
        let record = EpisodeRecord {
            support: ep.support.iter().map(sentence_record).collect(),
            query: ep.query.iter().map(sentence_record).collect(),
            types: &ep.types,
        };
        s.push_str(&serde_json::to_string(&record).expect("record serializes"));
        s.push('\n');
    }
    Ok(s)
}

fn sentence_record(seq: &LabeledSequence) -> SentenceRecord<'_> {
    let tags = seq.tags();
    if crate::episode::spans_from_tags(&tags) != seq.spans {
        warn!("adjacent same-type spans merge in flat tag form");
    }
    SentenceRecord {
        tokens: &seq.tokens,
        tags,
    }
}

/// Keeps valid episodes; invalid ones abort under `strict`, else are skipped.
fn admit(set: &mut EpisodeSet, ep: Episode, line: usize, strict: bool) -> Result<()> {
    match ep.validate() {
        Ok(()) => {
            set.episodes.push(ep);
            Ok(())
        }
        Err(e) if strict => Err(e.context(format!("episode on line {line}"))),
        Err(e) => {
            warn!("skipping episode on line {line}: {e}");
            Ok(())
        }
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::parse(line_no, "<record>", "expected a JSON object")),
        Err(e) => Err(Error::parse(line_no, "<record>", e.to_string())),
    }
}

fn field<'a>(map: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value> {
    map.get(name).ok_or_else(|| Error::parse(line, name, "missing field"))
}

fn string_list(value: &Value, line: usize, name: &str) -> Result<Vec<String>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::parse(line, name, "expected an array of strings"))?;
    arr.iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::parse(line, name, "expected a string element"))
        })
        .collect()
}

fn nested_string_lists(value: &Value, line: usize, name: &str) -> Result<Vec<Vec<String>>> {
    value
        .as_array()
        .ok_or_else(|| Error::parse(line, name, "expected an array of arrays"))?
        .iter()
        .map(|v| string_list(v, line, name))
        .collect()
}

fn warn_extra(map: &Map<String, Value>, known: &[&str], line: usize) {
    for k in map.keys().filter(|k| !known.contains(&k.as_str())) {
        warn!("line {line}: dropping field `{k}` not representable in canonical form");
    }
}

fn make_sentence(tokens: Vec<String>, tags: &[String], line: usize, name: &str) -> Result<LabeledSequence> {
    if tokens.len() != tags.len() {
        return Err(Error::parse(
            line,
            name,
            format!("{} tokens but {} tags", tokens.len(), tags.len()),
        ));
    }
    if tokens.is_empty() {
        return Err(Error::parse(line, name, "empty sentence"));
    }
    // Validation of the resulting spans (declared types etc.) happens per episode.
    Ok(LabeledSequence {
        tokens,
        spans: crate::episode::spans_from_tags(tags),
    })
}

fn parse_canonical(text: &str, opts: &LoadOptions) -> Result<EpisodeSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, header)) = lines.next() else {
        return Ok(EpisodeSet::new(opts.split_tag));
    };
    let hmap = parse_line(hline, header)?;
    let version = field(&hmap, hline, "format_version")?
        .as_u64()
        .ok_or_else(|| Error::parse(hline, "format_version", "expected an integer"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::parse(
            hline,
            "format_version",
            format!("unsupported version {version}"),
        ));
    }
    let split: SplitTag = field(&hmap, hline, "split_tag")?
        .as_str()
        .ok_or_else(|| Error::parse(hline, "split_tag", "expected a string"))?
        .parse()
        .map_err(|e: Error| Error::parse(hline, "split_tag", e.to_string()))?;
    let mut set = EpisodeSet::new(split);
    for (line, raw) in lines {
        let map = parse_line(line, raw)?;
        let types = string_list(field(&map, line, "types")?, line, "types")?;
        let mut parts = Vec::with_capacity(2);
        for part in ["support", "query"] {
            let arr = field(&map, line, part)?
                .as_array()
                .ok_or_else(|| Error::parse(line, part, "expected an array of sentences"))?;
            let mut seqs = Vec::with_capacity(arr.len());
            for (j, v) in arr.iter().enumerate() {
                let name = format!("{part}[{j}]");
                let obj = v
                    .as_object()
                    .ok_or_else(|| Error::parse(line, &name, "expected an object"))?;
                let tokens = string_list(field(obj, line, "tokens")?, line, &format!("{name}.tokens"))?;
                let tags = string_list(field(obj, line, "tags")?, line, &format!("{name}.tags"))?;
                seqs.push(make_sentence(tokens, &tags, line, &name)?);
            }
            parts.push(seqs);
        }
        let query = parts.pop().unwrap();
        let support = parts.pop().unwrap();
        admit(&mut set, Episode { support, query, types }, line, opts.strict)?;
    }
    Ok(set)
}

fn parse_fewnerd(text: &str, opts: &LoadOptions) -> Result<EpisodeSet> {
    let mut set = EpisodeSet::new(opts.split_tag);
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let map = parse_line(line, raw)?;
        warn_extra(&map, &["support", "query", "types"], line);
        let types = string_list(field(&map, line, "types")?, line, "types")?;
        let mut parts = Vec::with_capacity(2);
        for part in ["support", "query"] {
            let obj = field(&map, line, part)?
                .as_object()
                .ok_or_else(|| Error::parse(line, part, "expected an object"))?;
            let words = nested_string_lists(field(obj, line, "word")?, line, &format!("{part}.word"))?;
            let labels = nested_string_lists(field(obj, line, "label")?, line, &format!("{part}.label"))?;
            if words.len() != labels.len() {
                return Err(Error::parse(line, part, "word/label sentence counts differ"));
            }
            let seqs = words
                .into_iter()
                .zip(&labels)
                .enumerate()
                .map(|(j, (w, l))| make_sentence(w, l, line, &format!("{part}[{j}]")))
                .collect::<Result<Vec<_>>>()?;
            parts.push(seqs);
        }
        let query = parts.pop().unwrap();
        let support = parts.pop().unwrap();
        admit(&mut set, Episode { support, query, types }, line, opts.strict)?;
    }
    Ok(set)
}

/// BIO tags to spans; `B-X B-X` yields two spans, stray `I-X` opens a span.
fn spans_from_bio(tags: &[String], line: usize, name: &str) -> Result<Vec<TypedSpan>> {
    let mut spans: Vec<TypedSpan> = Vec::new();
    let mut open: Option<TypedSpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        if tag == OUTSIDE {
            spans.extend(open.take());
            continue;
        }
        let (prefix, ty) = tag
            .split_once('-')
            .ok_or_else(|| Error::parse(line, name, format!("tag `{tag}` is not BIO")))?;
        match (prefix, open.as_mut()) {
            ("I", Some(cur)) if cur.entity_type == ty => cur.end = i,
            ("B", _) | ("I", _) => {
                spans.extend(open.take());
                open = Some(TypedSpan::new(i, i, ty));
            }
            _ => return Err(Error::parse(line, name, format!("tag `{tag}` is not BIO"))),
        }
    }
    spans.extend(open);
    Ok(spans)
}

fn parse_crossdataset(text: &str, opts: &LoadOptions) -> Result<EpisodeSet> {
    let mut set = EpisodeSet::new(opts.split_tag);
    if text.trim().is_empty() {
        return Ok(set);
    }
    let root = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Error::parse(1, "<root>", "expected an object of domains")),
        Err(e) => return Err(Error::parse(e.line(), "<root>", e.to_string())),
    };
    // The whole file is one JSON document; "line" numbers index episodes.
    let mut ordinal = 0;
    for (domain, eps) in &root {
        let eps = eps
            .as_array()
            .ok_or_else(|| Error::parse(1, domain, "expected a list of episodes"))?;
        for ep in eps {
            ordinal += 1;
            let map = ep
                .as_object()
                .ok_or_else(|| Error::parse(ordinal, domain, "expected an episode object"))?;
            warn_extra(map, &["support", "batch"], ordinal);
            let mut parts = Vec::with_capacity(2);
            for part in ["support", "batch"] {
                let obj = field(map, ordinal, part)?
                    .as_object()
                    .ok_or_else(|| Error::parse(ordinal, part, "expected an object"))?;
                let ins = nested_string_lists(field(obj, ordinal, "seq_ins")?, ordinal, &format!("{part}.seq_ins"))?;
                let outs = nested_string_lists(field(obj, ordinal, "seq_outs")?, ordinal, &format!("{part}.seq_outs"))?;
                if ins.len() != outs.len() {
                    return Err(Error::parse(ordinal, part, "seq_ins/seq_outs counts differ"));
                }
                let mut seqs = Vec::with_capacity(ins.len());
                for (j, (tokens, tags)) in ins.into_iter().zip(&outs).enumerate() {
                    let name = format!("{part}[{j}]");
                    if tokens.len() != tags.len() || tokens.is_empty() {
                        return Err(Error::parse(ordinal, &name, "token/tag length mismatch"));
                    }
                    let spans = spans_from_bio(tags, ordinal, &name)?;
                    seqs.push(LabeledSequence { tokens, spans });
                }
                parts.push(seqs);
            }
            let query = parts.pop().unwrap();
            let support = parts.pop().unwrap();
            let types: BTreeSet<String> = support
                .iter()
                .flat_map(|s| s.spans.iter().map(|sp| sp.entity_type.clone()))
                .collect();
            admit(
                &mut set,
                Episode {
                    support,
                    query,
                    types: types.into_iter().collect(),
                },
                ordinal,
                opts.strict,
            )?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> LoadOptions {
        LoadOptions::default()
    }

    const TABLE1: &str = r#"{"format_version":1,"split_tag":"test"}
{"support":[{"tokens":["Jack","Gordon","is","an","actor"],"tags":["person-actor","person-actor","O","O","O"]},{"tokens":["the","film","Saving","Private","Ryan"],"tags":["O","O","art-film","art-film","art-film"]}],"query":[{"tokens":["Kurland","starred","in","Taps"],"tags":["person-actor","O","O","art-film"]}],"types":["person-actor","art-film"]}
"#;

    #[test]
    fn loads_two_way_one_shot_episode() {
        let set = parse_episodes(TABLE1, &canonical()).unwrap();
        assert_eq!(set.split_tag, SplitTag::Test);
        let ep = &set.episodes[0];
        assert_eq!(ep.support[0].spans, vec![TypedSpan::new(0, 1, "person-actor")]);
        assert_eq!(ep.query[0].spans[1], TypedSpan::new(3, 3, "art-film"));
        assert_eq!(ep.types, vec!["person-actor", "art-film"]);
    }

    #[test]
    fn corpus_sentences_split_on_blank_lines() {
        let text = "Jack\tperson\nGordon\tperson\nacts\tO\n\n\nin\tO\nRome\tloc\n";
        let corpus = parse_corpus(text).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].spans, vec![TypedSpan::new(0, 1, "person")]);
        assert_eq!(corpus[1].tokens, vec!["in", "Rome"]);
        let err = parse_corpus("a b c\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn empty_input_is_empty_set() {
        assert!(parse_episodes("", &canonical()).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let text = "{\"format_version\":1,\"split_tag\":\"dev\"}\n{\"support\":[],\"query\":[],\"types\":[1]}\n";
        let err = parse_episodes(text, &canonical()).unwrap_err();
        match err {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "types");
            }
            other => panic!("unexpected {other}"),
        }
        let text = "{\"format_version\":1,\"split_tag\":\"dev\"}\n{\"support\":[{\"tokens\":[\"a\"]}],\"query\":[],\"types\":[\"x\"]}\n";
        let err = parse_episodes(text, &canonical()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, ref field, .. } if field == "tags"));
    }

    #[test]
    fn unknown_type_is_validation_error_unless_lenient() {
        let text = "{\"format_version\":1,\"split_tag\":\"dev\"}\n{\"support\":[{\"tokens\":[\"a\"],\"tags\":[\"y\"]}],\"query\":[],\"types\":[\"x\"]}\n";
        let err = parse_episodes(text, &canonical()).unwrap_err();
        assert!(matches!(err.root(), Error::Validation(_)));
        let lenient = LoadOptions {
            strict: false,
            ..canonical()
        };
        assert!(parse_episodes(text, &lenient).unwrap().is_empty());
    }

    #[test]
    fn fewnerd_layout() {
        let text = r#"{"support":{"word":[["Jack","Gordon","acts"]],"label":[["person-actor","person-actor","O"]]},"query":{"word":[["Taps"]],"label":[["O"]]},"types":["person-actor"]}"#;
        let opts = LoadOptions {
            format: EpisodeFormat::FewNerd,
            ..canonical()
        };
        let set = parse_episodes(text, &opts).unwrap();
        assert_eq!(
            set.episodes[0].support[0].spans,
            vec![TypedSpan::new(0, 1, "person-actor")]
        );
    }

    #[test]
    fn crossdataset_layout_keeps_adjacent_bio_spans() {
        let text = r#"{"news":[{"support":{"seq_ins":[["a","b","c"]],"seq_outs":[["B-PER","B-PER","O"]]},"batch":{"seq_ins":[["d"]],"seq_outs":[["B-LOC"]]}}]}"#;
        let opts = LoadOptions {
            format: EpisodeFormat::CrossDataset,
            strict: false,
            ..canonical()
        };
        // Query type LOC is not a support type: skipped when lenient.
        assert!(parse_episodes(text, &opts).unwrap().is_empty());
        let text = text.replace("B-LOC", "I-PER");
        let set = parse_episodes(&text, &opts).unwrap();
        let ep = &set.episodes[0];
        assert_eq!(ep.types, vec!["PER"]);
        assert_eq!(
            ep.support[0].spans,
            vec![TypedSpan::new(0, 0, "PER"), TypedSpan::new(1, 1, "PER")]
        );
        assert_eq!(ep.query[0].spans, vec![TypedSpan::new(0, 0, "PER")]);
    }

    #[test]
    fn crossdataset_rejects_missing_fields() {
        let opts = LoadOptions {
            format: EpisodeFormat::CrossDataset,
            ..canonical()
        };
        let err = parse_episodes(r#"{"d":[{"support":{"seq_ins":[]}}]}"#, &opts).unwrap_err();
        assert!(matches!(err, Error::Parse { ref field, .. } if field == "batch" || field == "seq_outs"));
    }

    #[test]
    fn empty_set_saves_header_only() {
        let s = to_canonical_string(&EpisodeSet::new(SplitTag::Dev)).unwrap();
        assert_eq!(s, "{\"format_version\":1,\"split_tag\":\"dev\"}\n");
    }
}
