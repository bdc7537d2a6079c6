//! NER corpus model: sentences with typed entity spans, two-column CoNLL
//! I/O with BIO tags, and deterministic seed sampling.
//!
//! Spans are half-open token ranges and never overlap. Sentence ids follow
//! `<dataset>:<split>:<ordinal>` for corpus sentences and
//! `<method>:<parent-id>:<k>` for augmented ones.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

/// Where a sentence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Eda,
    Wordnet,
    Naive,
    Gda,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Seed => "seed",
            Origin::Eda => "eda",
            Origin::Wordnet => "wordnet",
            Origin::Naive => "naive",
            Origin::Gda => "gda",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

impl Provenance {
    pub fn seed() -> Self {
        Self {
            origin: Origin::Seed,
            parent: None,
        }
    }

    pub fn derived(origin: Origin, parent: Option<String>) -> Self {
        Self { origin, parent }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<Token>,
    pub entities: Vec<EntitySpan>,
    pub provenance: Provenance,
}

impl Sentence {
    /// Builds a sentence from raw words, numbering tokens from zero.
    /// Entities are sorted by start offset; call [`Sentence::validate`] to check them.
    pub fn new<S: Into<String>>(
        id: impl Into<String>,
        words: impl IntoIterator<Item = S>,
        mut entities: Vec<EntitySpan>,
        provenance: Provenance,
    ) -> Self {
        let tokens = words
            .into_iter()
            .enumerate()
            .map(|(index, w)| Token {
                text: w.into(),
                index,
            })
            .collect();
        entities.sort();
        Self {
            id: id.into(),
            tokens,
            entities,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.words().collect::<Vec<_>>().join(" ")
    }

    pub fn surface(&self, span: &EntitySpan) -> String {
        self.tokens[span.start..span.end]
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Surface text of every entity, in span order.
    pub fn entity_surfaces(&self) -> Vec<String> {
        self.entities.iter().map(|e| self.surface(e)).collect()
    }

    pub fn is_entity_token(&self, index: usize) -> bool {
        self.entities.iter().any(|e| e.contains(index))
    }

    /// Checks token and span invariants. With an inventory, every entity type
    /// must belong to it.
    pub fn validate(&self, inventory: Option<&[String]>) -> Result<()> {
        let invalid = |message: String| Error::InvalidSentence {
            id: self.id.clone(),
            message,
        };
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.index != i {
                return Err(invalid(format!("token {i} carries index {}", tok.index)));
            }
            if tok.text.is_empty() || tok.text.chars().any(char::is_whitespace) {
                return Err(invalid(format!("token {i} is empty or contains whitespace")));
            }
        }
        for (i, span) in self.entities.iter().enumerate() {
            if span.start >= span.end || span.end > self.tokens.len() {
                return Err(invalid(format!(
                    "span [{}, {}) out of range for {} tokens",
                    span.start,
                    span.end,
                    self.tokens.len()
                )));
            }
            if span.entity_type.is_empty() || span.entity_type.chars().any(char::is_whitespace) {
                return Err(invalid(format!("span {i} has a malformed type")));
            }
            if let Some(inv) = inventory {
                if !inv.contains(&span.entity_type) {
                    return Err(invalid(format!(
                        "entity type `{}` not in inventory",
                        span.entity_type
                    )));
                }
            }
            if let Some(prev) = i.checked_sub(1).map(|p| &self.entities[p]) {
                if prev.start > span.start {
                    return Err(invalid("spans are not sorted".into()));
                }
                if prev.overlaps(span) {
                    return Err(invalid(format!(
                        "spans [{}, {}) and [{}, {}) overlap",
                        prev.start, prev.end, span.start, span.end
                    )));
                }
            }
        }
        match (self.provenance.origin, &self.provenance.parent) {
            (Origin::Seed, Some(_)) => Err(invalid("seed sentence carries a parent id".into())),
            (Origin::Eda | Origin::Wordnet | Origin::Naive, None) => Err(invalid(format!(
                "{} sentence lacks a parent id",
                self.provenance.origin
            ))),
            _ => Ok(()),
        }
    }
}

/// Id for the `k`-th augmented sentence derived from `parent` by `origin`.
pub fn augmented_id(origin: Origin, parent: &str, k: usize) -> String {
    format!("{origin}:{parent}:{k}")
}

/// Splits generated text into tokens: whitespace first, then trailing
/// `.,;:?!` characters are detached into their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    const DETACH: &[char] = &['.', ',', ';', ':', '?', '!'];
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let body = chunk.trim_end_matches(DETACH);
        if !body.is_empty() {
            out.push(body.to_string());
        }
        out.extend(chunk[body.len()..].chars().map(String::from));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(t) => write!(f, "B-{t}"),
            Tag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let (prefix, ty) = s
            .split_once('-')
            .ok_or_else(|| format!("unknown tag syntax `{s}`"))?;
        if ty.is_empty() {
            return Err(format!("tag `{s}` has an empty entity type"));
        }
        match prefix {
            "B" => Ok(Tag::Begin(ty.to_string())),
            "I" => Ok(Tag::Inside(ty.to_string())),
            _ => Err(format!("unknown tag syntax `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence {
    pub tags: Vec<Tag>,
}

impl TagSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn encode_bio(sentence: &Sentence) -> TagSequence {
    let mut tags = vec![Tag::Outside; sentence.len()];
    for span in &sentence.entities {
        for (i, tag) in tags.iter_mut().enumerate().take(span.end).skip(span.start) {
            *tag = if i == span.start {
                Tag::Begin(span.entity_type.clone())
            } else {
                Tag::Inside(span.entity_type.clone())
            };
        }
    }
    TagSequence { tags }
}

/// Why a tag cannot follow its predecessor, if it cannot.
fn transition_error(prev: Option<&Tag>, tag: &Tag) -> Option<String> {
    let Tag::Inside(ty) = tag else { return None };
    match prev {
        Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == ty => None,
        Some(Tag::Begin(p)) | Some(Tag::Inside(p)) => {
            Some(format!("I-{ty} cannot continue an entity of type {p}"))
        }
        Some(Tag::Outside) => Some(format!("I-{ty} cannot follow O")),
        None => Some(format!("I-{ty} cannot start a sentence")),
    }
}

/// Decodes a tag sequence into spans. `token_count` must equal the tag count.
pub fn decode_bio(token_count: usize, tags: &TagSequence) -> Result<Vec<EntitySpan>> {
    if token_count != tags.len() {
        return Err(Error::InvalidSentence {
            id: String::new(),
            message: format!("{} tags for {} tokens", tags.len(), token_count),
        });
    }
    decode_tags(&tags.tags).map_err(|(pos, message)| Error::InvalidSentence {
        id: String::new(),
        message: format!("tag {pos}: {message}"),
    })
}

fn decode_tags(tags: &[Tag]) -> std::result::Result<Vec<EntitySpan>, (usize, String)> {
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        if let Some(msg) = transition_error(i.checked_sub(1).map(|p| &tags[p]), tag) {
            return Err((i, msg));
        }
        match tag {
            Tag::Inside(_) => {
                if let Some(span) = open.as_mut() {
                    span.end = i + 1;
                }
            }
            Tag::Begin(ty) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(i, i + 1, ty.clone()));
            }
            Tag::Outside => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Parses two-column CoNLL (`token tag`, blank line between sentences).
/// Ids are `conll:train:<ordinal>`; see [`parse_split`] to choose the prefix.
pub fn parse_conll(text: &str) -> Result<Vec<Sentence>> {
    parse_split(text, "conll", Split::Train)
}

pub fn parse_split(text: &str, dataset: &str, split: Split) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<Tag> = Vec::new();

    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<Tag>| {
        if words.is_empty() {
            return;
        }
        // Transitions were checked line by line, so decoding cannot fail here.
        let spans = decode_tags(tags).expect("tags validated during parse");
        let id = format!("{dataset}:{}:{}", split.as_str(), sentences.len());
        sentences.push(Sentence::new(
            id,
            std::mem::take(words),
            spans,
            Provenance::seed(),
        ));
        tags.clear();
    };

    for (lineno, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            flush(&mut words, &mut tags);
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.first() == Some(&"-DOCSTART-") {
            continue;
        }
        if cols.len() != 2 {
            return Err(Error::ConllParse {
                line: lineno,
                message: format!("expected 2 columns (token, tag), found {}", cols.len()),
            });
        }
        let tag: Tag = cols[1].parse().map_err(|message| Error::ConllParse {
            line: lineno,
            message,
        })?;
        if let Some(message) = transition_error(tags.last(), &tag) {
            return Err(Error::ConllParse {
                line: lineno,
                message,
            });
        }
        words.push(cols[0].to_string());
        tags.push(tag);
    }
    flush(&mut words, &mut tags);
    Ok(sentences)
}

pub fn serialize_conll(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let tags = encode_bio(s);
        for (tok, tag) in s.tokens.iter().zip(&tags.tags) {
            out.push_str(&tok.text);
            out.push(' ');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Entity types in order of first appearance.
pub fn inventory_of<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut inv = Vec::new();
    for s in sentences {
        for e in &s.entities {
            if seen.insert(e.entity_type.as_str()) {
                inv.push(e.entity_type.clone());
            }
        }
    }
    inv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub entity_type_inventory: Vec<String>,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub entities: usize,
    pub inventory: Vec<String>,
}

impl Dataset {
    /// Builds a dataset whose inventory is every type used across the splits.
    pub fn new(
        name: impl Into<String>,
        train: Vec<Sentence>,
        dev: Vec<Sentence>,
        test: Vec<Sentence>,
    ) -> Self {
        let entity_type_inventory = inventory_of(train.iter().chain(&dev).chain(&test));
        Self {
            name: name.into(),
            entity_type_inventory,
            train,
            dev,
            test,
        }
    }

    pub fn split(&self, split: Split) -> &[Sentence] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            name: self.name.clone(),
            train: self.train.len(),
            dev: self.dev.len(),
            test: self.test.len(),
            entities: Split::ALL
                .iter()
                .flat_map(|s| self.split(*s))
                .map(|s| s.entities.len())
                .sum(),
            inventory: self.entity_type_inventory.clone(),
        }
    }

    /// Loads a dataset from a directory holding `train`, `dev` and `test`
    /// files (extension `.conll`, `.txt` or none; missing splits are empty),
    /// or from a single CoNLL file treated as the train split.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));

        if path.is_dir() {
            let mut splits: Vec<Vec<Sentence>> = Vec::with_capacity(3);
            for split in Split::ALL {
                let file = ["conll", "txt", ""]
                    .iter()
                    .map(|ext| path.join(split.as_str()).with_extension(ext))
                    .find(|p| p.is_file());
                let sentences = match file {
                    Some(f) => parse_split(&read(&f)?, &name, split).map_err(|e| match e {
                        Error::ConllParse { line, message } => Error::ConllParse {
                            line,
                            message: format!("{}: {message}", f.display()),
                        },
                        other => other,
                    })?,
                    None => Vec::new(),
                };
                splits.push(sentences);
            }
            let test = splits.pop().unwrap_or_default();
            let dev = splits.pop().unwrap_or_default();
            let train = splits.pop().unwrap_or_default();
            Ok(Dataset::new(name, train, dev, test))
        } else {
            let train = parse_split(&read(path)?, &name, Split::Train)?;
            Ok(Dataset::new(name, train, Vec::new(), Vec::new()))
        }
    }
}

/// Draws `n` distinct train sentences. The selection depends only on
/// `(train split, n, rng_seed)` and is returned in corpus order.
pub fn sample_seeds(dataset: &Dataset, n: usize, rng_seed: u64) -> Result<Vec<Sentence>> {
    let available = dataset.train.len();
    if n > available {
        return Err(Error::SampleTooLarge {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked = rand::seq::index::sample(&mut rng, available, n).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| {
            let mut s = dataset.train[i].clone();
            s.provenance = Provenance::seed();
            s
        })
        .collect())
}
