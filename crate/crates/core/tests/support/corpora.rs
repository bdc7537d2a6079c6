//! Proptest strategies for sentences and corpora.

#![allow(dead_code)]

use gda_core::corpus::{EntitySpan, Provenance, Sentence};
use proptest::prelude::*;

pub const TYPES: [&str; 4] = ["PER", "ORG", "Task", "OtherScientificTerm"];

/// Tokens with no whitespace, including punctuation, digits, hyphenation,
/// abbreviations and non-ASCII text.
pub fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => prop::sample::select(vec![
            "the", "model", "improves", "accuracy", "on", "news", "data", "natural", "application",
            "use", "interest", "a", "of", "and", "with", "-DOCSTART-x", "O", "B-PER",
        ])
        .prop_map(String::from),
        2 => "[A-Za-z][a-z]{0,8}",
        1 => prop::sample::select(vec![",", ".", ";", "(", ")", "U.S.", "3.5", "e.g.", "Zürich", "naïve", "--"])
            .prop_map(String::from),
    ]
}

#[derive(Debug, Clone)]
enum Segment {
    Word(String),
    Entity(Vec<String>, &'static str),
}

fn segment() -> impl Strategy<Value = Segment> {
    prop_oneof![
        3 => word().prop_map(Segment::Word),
        1 => (prop::collection::vec(word(), 1..4), prop::sample::select(TYPES.to_vec()))
            .prop_map(|(w, t)| Segment::Entity(w, t)),
    ]
}

/// A valid seed sentence with 1..=max_segments segments.
pub fn sentence(max_segments: usize) -> impl Strategy<Value = Sentence> {
    prop::collection::vec(segment(), 1..=max_segments).prop_map(|segs| {
        let mut words = Vec::new();
        let mut spans = Vec::new();
        for seg in segs {
            match seg {
                Segment::Word(w) => words.push(w),
                Segment::Entity(ws, ty) => {
                    let start = words.len();
                    words.extend(ws);
                    spans.push(EntitySpan::new(start, words.len(), ty));
                }
            }
        }
        Sentence::new("gen:train:0", words, spans, Provenance::seed())
    })
}

/// A corpus whose ids follow the parser's numbering for `conll:train`.
pub fn corpus(max_sentences: usize) -> impl Strategy<Value = Vec<Sentence>> {
    prop::collection::vec(sentence(12), 0..=max_sentences).prop_map(|mut v| {
        for (i, s) in v.iter_mut().enumerate() {
            s.id = format!("conll:train:{i}");
        }
        v
    })
}
