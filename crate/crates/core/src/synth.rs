//! Synthetic corpora and canned LLM replies for offline runs.
//!
//! Nothing here models real text. The corpus generator produces valid,
//! varied CoNLL data of a chosen shape; the responder answers every prompt
//! stage with a well-formed reply so the full chain can run without a
//! network or a hand-written script.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

use crate::corpus::{Dataset, EntitySpan, Provenance, Sentence, Split};
use crate::llm::{CompletionRequest, MockBackend};
use crate::rng;

pub const DEFAULT_TYPES: [&str; 4] = ["PER", "ORG", "LOC", "MISC"];

const FILLER: &[&str] = &[
    "the", "a", "report", "said", "on", "monday", "shares", "rose", "after", "its", "quarterly",
    "results", "beat", "forecasts", "and", "analysts", "expect", "further", "gains", "in", "market",
    "early", "trading", "was", "by", "with", "of", "for", "loan", "agreement", "signed", "between",
    "parties", "under", "terms", "natural", "possible", "application", "use", "interest", "rate",
];

const PUNCT: &[&str] = &[",", ".", ";", ":", "(", ")", "-"];

const SURFACES: &[&[&str]] = &[
    &["John", "Smith"],
    &["Acme", "Holdings"],
    &["Boston"],
    &["New", "York"],
    &["Maria", "Lopez"],
    &["Globex"],
    &["U.S."],
    &["Euro", "Stoxx", "50"],
    &["Bank", "of", "Lisbon"],
    &["Nasdaq"],
    &["Li", "Wei"],
    &["Initech", "Ltd."],
];

/// Generates a sentence of roughly `max_len` tokens or fewer with one to
/// four non-overlapping entities drawn from `types`.
pub fn synthetic_sentence<R: Rng>(rng: &mut R, id: String, types: &[String], max_len: usize) -> Sentence {
    let target = rng.random_range(1..=max_len.max(1));
    let mut words: Vec<String> = Vec::with_capacity(target + 4);
    let mut spans = Vec::new();
    let want_entities = if types.is_empty() { 0 } else { rng.random_range(1..=4usize) };
    while words.len() < target {
        let roll: f64 = rng.random();
        if spans.len() < want_entities && roll < 0.25 {
            let surface = SURFACES.choose(rng).expect("non-empty");
            let ty = types.choose(rng).expect("non-empty").clone();
            let start = words.len();
            words.extend(surface.iter().map(|s| s.to_string()));
            spans.push(EntitySpan::new(start, words.len(), ty));
        } else if roll < 0.33 {
            words.push(PUNCT.choose(rng).expect("non-empty").to_string());
        } else {
            words.push(FILLER.choose(rng).expect("non-empty").to_string());
        }
    }
    if spans.is_empty() && !types.is_empty() {
        let ty = types.choose(rng).expect("non-empty").clone();
        let start = words.len();
        words.push("Nasdaq".to_string());
        spans.push(EntitySpan::new(start, start + 1, ty));
    }
    Sentence::new(id, words, spans, Provenance::seed())
}

/// A dataset with the given split sizes and entity types.
pub fn synthetic_dataset(name: &str, sizes: [usize; 3], types: &[&str], rng_seed: u64) -> Dataset {
    let types: Vec<String> = types.iter().map(|t| t.to_string()).collect();
    let mut splits = Split::ALL.iter().zip(sizes).map(|(split, n)| {
        let mut rng = rng::stream(rng_seed, &["synth", name, split.as_str()]);
        (0..n)
            .map(|i| synthetic_sentence(&mut rng, format!("{name}:{}:{i}", split.as_str()), &types, 30))
            .collect::<Vec<_>>()
    });
    let train = splits.next().unwrap_or_default();
    let dev = splits.next().unwrap_or_default();
    let test = splits.next().unwrap_or_default();
    Dataset::new(name, train, dev, test)
}

fn stage_of(tag: &str) -> Option<&str> {
    tag.split('/').nth(1)
}

/// Produces a well-formed reply for any prompt stage. Generation replies
/// hold four sentences, one more than the default request, unique per
/// request and typed from `inventory`. Returns `None` for
/// unrecognized tags.
pub fn synthetic_reply(request: &CompletionRequest, inventory: &[String]) -> Option<String> {
    if inventory.is_empty() {
        return None;
    }
    let fp = request.fingerprint();
    let stamp = &fp[..10];
    let mut rng = rng::stream(0, &["reply", &fp]);
    let body = match stage_of(&request.request_tag)? {
        "abstraction" => {
            let roles: serde_json::Map<String, serde_json::Value> = inventory
                .iter()
                .map(|t| (t.clone(), json!(format!("a {} named in the sentence", t.to_lowercase()))))
                .collect();
            json!({
                "context": "Business news about companies, people and places.",
                "structure": "A main clause followed by a prepositional phrase.",
                "roles": roles,
            })
        }
        "seed_generation" | "guidance" | "naive" => {
            let items: Vec<serde_json::Value> = (0..4)
                .map(|k| {
                    let a = SURFACES.choose(&mut rng).expect("non-empty").join(" ");
                    let b = SURFACES.choose(&mut rng).expect("non-empty").join(" ");
                    let (ta, tb) = (
                        inventory.choose(&mut rng).expect("non-empty"),
                        inventory.choose(&mut rng).expect("non-empty"),
                    );
                    let verb = FILLER.choose(&mut rng).expect("non-empty");
                    json!({
                        "sentence": format!("In note {stamp}-{k} , {a} {verb} ties with {b} ."),
                        "entities": [
                            {"text": a, "type": ta},
                            {"text": b, "type": tb},
                        ],
                    })
                })
                .collect();
            serde_json::Value::Array(items)
        }
        _ => return None,
    };
    Some(format!("```json\n{body}\n```"))
}

/// Mock backend answering every request through [`synthetic_reply`].
pub fn synthetic_backend(inventory: Vec<String>) -> MockBackend {
    MockBackend::with_responder(move |req| synthetic_reply(req, &inventory))
}
