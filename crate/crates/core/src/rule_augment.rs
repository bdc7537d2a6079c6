//! Rule-based baselines: EDA (synonym replacement, random insertion, random
//! swap, random deletion) and lexicon-driven synonym replacement.
//!
//! Entity tokens are never touched. A sentence is handled as a sequence of
//! units where every entity span is one atomic unit, so insertions can only
//! land between units and swaps or deletions only ever move plain words.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{augmented_id, EntitySpan, Origin, Provenance, Sentence};
use crate::error::{Error, Result};
use crate::rng;

const DEMO_LEXICON: &str = include_str!("../fixtures/demo_lexicon.tsv");

/// Lowercase lemma to ordered synonym list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Small bundled lexicon covering the demo fixtures.
    pub fn demo() -> Self {
        Self::parse(DEMO_LEXICON).expect("bundled lexicon is well formed")
    }

    pub fn demo_tsv() -> &'static str {
        DEMO_LEXICON
    }

    /// Adds synonyms for `lemma`, merging with any existing entry. Synonyms
    /// equal to the lemma and repeated synonyms are dropped.
    pub fn insert<S: AsRef<str>>(&mut self, lemma: &str, synonyms: impl IntoIterator<Item = S>) {
        let key = lemma.trim().to_lowercase();
        let mut fresh: Vec<String> = Vec::new();
        for syn in synonyms {
            let syn = syn.as_ref().trim();
            if syn.is_empty() || syn.to_lowercase() == key {
                continue;
            }
            fresh.push(syn.to_string());
        }
        if fresh.is_empty() {
            return;
        }
        let list = self.entries.entry(key).or_default();
        for syn in fresh {
            if !list.contains(&syn) {
                list.push(syn);
            }
        }
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.entries
            .get(&word.to_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Entries in lemma order.
    pub fn entries(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `lemma<TAB>syn1|syn2|...` rows. Blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            let row = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (lemma, syns) = line.split_once('\t').ok_or_else(|| Error::Lexicon {
                row,
                message: "expected `lemma<TAB>synonyms`".into(),
            })?;
            if lemma.trim().is_empty() {
                return Err(Error::Lexicon {
                    row,
                    message: "empty lemma".into(),
                });
            }
            if syns.contains('\t') {
                return Err(Error::Lexicon {
                    row,
                    message: "more than two tab-separated columns".into(),
                });
            }
            let list: Vec<&str> = syns.split('|').map(str::trim).collect();
            if list.iter().all(|s| s.is_empty()) {
                return Err(Error::Lexicon {
                    row,
                    message: format!("no synonyms for `{}`", lemma.trim()),
                });
            }
            lex.insert(lemma, list);
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// First `pool` synonyms of `word`, the candidate set for one replacement.
    fn pool(&self, word: &str, pool: usize) -> &[String] {
        let syns = self.synonyms(word);
        &syns[..syns.len().min(pool)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdaConfig {
    pub alpha_sr: f64,
    pub alpha_ri: f64,
    pub alpha_rs: f64,
    pub p_rd: f64,
    pub synonym_pool: usize,
    pub n_aug: usize,
}

impl Default for EdaConfig {
    fn default() -> Self {
        Self {
            alpha_sr: 0.1,
            alpha_ri: 0.1,
            alpha_rs: 0.1,
            p_rd: 0.1,
            synonym_pool: 10,
            n_aug: 3,
        }
    }
}

impl EdaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_sr", self.alpha_sr),
            ("alpha_ri", self.alpha_ri),
            ("alpha_rs", self.alpha_rs),
            ("p_rd", self.p_rd),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::AugmentConfig(format!("{name}={v} outside [0, 1]")));
            }
        }
        if self.synonym_pool == 0 {
            return Err(Error::AugmentConfig("synonym_pool must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentWarning {
    /// Every token belongs to an entity (or is punctuation); outputs are copies.
    NoEligibleTokens,
    /// At least one output came back identical to the seed.
    Unchanged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub sentences: Vec<Sentence>,
    pub warnings: Vec<AugmentWarning>,
}

impl AugmentWarning {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentWarning::NoEligibleTokens => "no_eligible_tokens",
            AugmentWarning::Unchanged => "unchanged",
        }
    }
}

impl Augmentation {
    fn flag(&mut self, w: AugmentWarning) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Unit {
    Word(String),
    Entity { tokens: Vec<String>, ty: String },
}

impl Unit {
    fn word(&self) -> Option<&str> {
        match self {
            Unit::Word(w) if is_eligible(w) => Some(w),
            _ => None,
        }
    }
}

fn is_eligible(word: &str) -> bool {
    word.chars().any(char::is_alphanumeric)
}

fn units_of(sentence: &Sentence) -> Vec<Unit> {
    let mut units = Vec::with_capacity(sentence.len());
    let mut spans = sentence.entities.iter().peekable();
    let mut i = 0;
    while i < sentence.len() {
        match spans.peek() {
            Some(span) if span.start == i => {
                units.push(Unit::Entity {
                    tokens: sentence.tokens[span.start..span.end]
                        .iter()
                        .map(|t| t.text.clone())
                        .collect(),
                    ty: span.entity_type.clone(),
                });
                i = span.end;
                spans.next();
            }
            _ => {
                units.push(Unit::Word(sentence.tokens[i].text.clone()));
                i += 1;
            }
        }
    }
    units
}

fn rebuild(units: &[Unit], id: String, provenance: Provenance) -> Sentence {
    let mut words = Vec::new();
    let mut spans = Vec::new();
    for u in units {
        match u {
            Unit::Word(w) => words.extend(w.split_whitespace().map(str::to_string)),
            Unit::Entity { tokens, ty } => {
                let start = words.len();
                words.extend(tokens.iter().cloned());
                spans.push(EntitySpan::new(start, words.len(), ty.clone()));
            }
        }
    }
    Sentence::new(id, words, spans, provenance)
}

fn eligible_positions(units: &[Unit]) -> Vec<usize> {
    (0..units.len()).filter(|&i| units[i].word().is_some()).collect()
}

fn count_for(alpha: f64, eligible: usize) -> usize {
    ((alpha * eligible as f64) as usize).max(1)
}

fn synonym_replacement(
    units: &mut [Unit],
    lex: &SynonymLexicon,
    n: usize,
    pool: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut words: Vec<String> = Vec::new();
    for u in units.iter() {
        if let Some(w) = u.word() {
            let w = w.to_lowercase();
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    words.shuffle(rng);
    let mut replaced = 0;
    for w in words {
        let Some(syn) = lex.pool(&w, pool).choose(rng) else {
            continue;
        };
        for u in units.iter_mut() {
            if u.word().is_some_and(|x| x.to_lowercase() == w) {
                *u = Unit::Word(syn.clone());
            }
        }
        replaced += 1;
        if replaced >= n {
            break;
        }
    }
}

fn random_insertion(
    units: &mut Vec<Unit>,
    lex: &SynonymLexicon,
    n: usize,
    pool: usize,
    rng: &mut ChaCha8Rng,
) {
    for _ in 0..n {
        let positions = eligible_positions(units);
        if positions.is_empty() {
            return;
        }
        for _ in 0..10 {
            let src = positions[rng.random_range(0..positions.len())];
            let word = units[src].word().expect("eligible position");
            if let Some(syn) = lex.pool(word, pool).choose(rng) {
                let at = rng.random_range(0..=units.len());
                units.insert(at, Unit::Word(syn.clone()));
                break;
            }
        }
    }
}

fn random_swap(units: &mut [Unit], n: usize, rng: &mut ChaCha8Rng) {
    let positions = eligible_positions(units);
    if positions.len() < 2 {
        return;
    }
    for _ in 0..n {
        let a = positions[rng.random_range(0..positions.len())];
        let mut b = a;
        for _ in 0..3 {
            b = positions[rng.random_range(0..positions.len())];
            if b != a {
                break;
            }
        }
        units.swap(a, b);
    }
}

fn random_deletion(units: &mut Vec<Unit>, p: f64, rng: &mut ChaCha8Rng) {
    let positions = eligible_positions(units);
    if positions.len() <= 1 {
        return;
    }
    let doomed: Vec<usize> = positions
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < p)
        .collect();
    let survivor = (doomed.len() == positions.len())
        .then(|| positions[rng.random_range(0..positions.len())]);
    let mut i = 0;
    units.retain(|_| {
        let keep = !doomed.contains(&i) || Some(i) == survivor;
        i += 1;
        keep
    });
}

#[derive(Debug, Clone, Copy)]
enum Operation {
    Replace,
    Insert,
    Swap,
    Delete,
}

/// EDA with entity tokens excluded from every operation. Produces
/// `cfg.n_aug` sentences with provenance `eda` and ids `eda:<seed>:<k>`.
pub fn eda_augment(
    seed: &Sentence,
    lexicon: &SynonymLexicon,
    cfg: &EdaConfig,
    rng_seed: u64,
) -> Result<Augmentation> {
    cfg.validate()?;
    let mut rng = rng::stream(rng_seed, &["eda", &seed.id]);
    let base = units_of(seed);
    let eligible = eligible_positions(&base).len();
    let mut out = Augmentation {
        sentences: Vec::with_capacity(cfg.n_aug),
        warnings: Vec::new(),
    };

    let mut variants: Vec<Vec<Unit>> = Vec::new();
    if eligible == 0 {
        out.flag(AugmentWarning::NoEligibleTokens);
        variants.resize(cfg.n_aug, base.clone());
    } else {
        let ops: Vec<(Operation, f64)> = [
            (Operation::Replace, cfg.alpha_sr),
            (Operation::Insert, cfg.alpha_ri),
            (Operation::Swap, cfg.alpha_rs),
            (Operation::Delete, cfg.p_rd),
        ]
        .into_iter()
        .filter(|(_, rate)| *rate > 0.0)
        .collect();
        // Split the budget over the enabled operations so disabling some
        // does not leave the output padded with copies.
        let per_op = if ops.is_empty() { 0 } else { cfg.n_aug.div_ceil(ops.len()) };
        for (op, rate) in ops {
            let n = count_for(rate, eligible);
            for _ in 0..per_op {
                let mut units = base.clone();
                match op {
                    Operation::Replace => {
                        synonym_replacement(&mut units, lexicon, n, cfg.synonym_pool, &mut rng)
                    }
                    Operation::Insert => {
                        random_insertion(&mut units, lexicon, n, cfg.synonym_pool, &mut rng)
                    }
                    Operation::Swap => random_swap(&mut units, n, &mut rng),
                    Operation::Delete => random_deletion(&mut units, rate, &mut rng),
                }
                variants.push(units);
            }
        }
        variants.shuffle(&mut rng);
        variants.truncate(cfg.n_aug);
        // All rates zero: nothing to apply, emit copies.
        while variants.len() < cfg.n_aug {
            variants.push(base.clone());
        }
    }

    for (k, units) in variants.iter().enumerate() {
        if *units == base {
            out.flag(AugmentWarning::Unchanged);
        }
        out.sentences.push(rebuild(
            units,
            augmented_id(Origin::Eda, &seed.id, k),
            Provenance::derived(Origin::Eda, Some(seed.id.clone())),
        ));
    }
    Ok(out)
}

/// Lexicon synonym replacement: each output swaps one randomly chosen
/// non-entity word for one of its first `pool` synonyms.
pub fn wordnet_augment(
    seed: &Sentence,
    lexicon: &SynonymLexicon,
    n_aug: usize,
    pool: usize,
    rng_seed: u64,
) -> Result<Augmentation> {
    if pool == 0 {
        return Err(Error::AugmentConfig("synonym pool must be at least 1".into()));
    }
    let mut rng = rng::stream(rng_seed, &["wordnet", &seed.id]);
    let base = units_of(seed);
    let replaceable: Vec<usize> = eligible_positions(&base)
        .into_iter()
        .filter(|&i| !lexicon.pool(base[i].word().expect("eligible"), pool).is_empty())
        .collect();
    let mut out = Augmentation {
        sentences: Vec::with_capacity(n_aug),
        warnings: Vec::new(),
    };
    if eligible_positions(&base).is_empty() {
        out.flag(AugmentWarning::NoEligibleTokens);
    }
    for k in 0..n_aug {
        let mut units = base.clone();
        if let Some(&pos) = replaceable.choose(&mut rng) {
            let word = units[pos].word().expect("eligible");
            let syn = lexicon
                .pool(word, pool)
                .choose(&mut rng)
                .expect("non-empty pool")
                .clone();
            units[pos] = Unit::Word(syn);
        } else {
            out.flag(AugmentWarning::Unchanged);
        }
        out.sentences.push(rebuild(
            &units,
            augmented_id(Origin::Wordnet, &seed.id, k),
            Provenance::derived(Origin::Wordnet, Some(seed.id.clone())),
        ));
    }
    Ok(out)
}
