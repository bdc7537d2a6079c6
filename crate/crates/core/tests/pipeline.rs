use std::collections::HashSet;
use std::path::PathBuf;

use gda_core::corpus::{parse_conll, Dataset, EntitySpan, Origin, Provenance, Sentence};
use gda_core::llm::{open_replay, CompletionRequest, MockBackend};
use gda_core::pipeline::{
    export_training_set, normalize_text, select_responses, Method, Pipeline, RoundRobin, RunConfig, RunManifest,
    SeedStatus, SelectionPolicy, Stage,
};
use gda_core::prompt::TemplateSet;
use gda_core::rule_augment::SynonymLexicon;
use gda_core::synth::{synthetic_backend, synthetic_dataset, synthetic_reply, DEFAULT_TYPES};
use gda_core::Error;
use proptest::prelude::*;

fn interlingua_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/interlingua")
}

fn one_seed(method: Method) -> RunConfig {
    RunConfig {
        method,
        seed_count: 1,
        target_augmented: 3,
        ..RunConfig::default()
    }
}

fn inventory() -> Vec<String> {
    DEFAULT_TYPES.iter().map(|s| s.to_string()).collect()
}

#[test]
fn interlingua_gda_replay() {
    let ds = Dataset::load(interlingua_dir()).unwrap();
    let templates = TemplateSet::default();
    let replay = open_replay(interlingua_dir().join("cassette.jsonl")).unwrap();
    let out = Pipeline::new(&ds, &templates)
        .with_backend(&replay)
        .with_cassette_digest(replay.cassette().digest())
        .run(&one_seed(Method::Gda))
        .unwrap();

    assert_eq!(out.seeds.len(), 1);
    assert_eq!(out.augmented.len(), 3);
    for (k, s) in out.augmented.iter().enumerate() {
        assert_eq!(s.id, format!("gda:interlingua:train:0:{k}"));
        assert_eq!(s.provenance.origin, Origin::Gda);
        assert_eq!(s.provenance.parent, None);
        s.validate(Some(&ds.entity_type_inventory)).unwrap();
    }
    let first = &out.augmented[0];
    assert_eq!(
        first.entity_surfaces(),
        ["symbolic , contrastive , neural , statistical , and rule-based approaches", "AI , ML , NLP , CV , and NLU"]
    );

    let m = &out.manifest;
    m.validate().unwrap();
    assert!(m.selected.iter().all(|s| s.chain_seed_id == "interlingua:train:0" && s.parent_id.is_none()));
    let log = &m.seed_logs[0];
    assert_eq!(log.status, SeedStatus::Completed);
    let stages: Vec<Stage> = log.stages.iter().map(|s| s.stage).collect();
    assert_eq!(stages, [Stage::SeedGeneration, Stage::Abstraction, Stage::Guidance]);
    let abs = log.abstraction.as_ref().unwrap();
    assert_eq!(abs.source_seed_ids, ["interlingua:train:0"]);
    assert!(abs.entity_roles.contains_key("Method"));
    // The guidance prompt carries the abstraction but never the seed.
    let guidance = &log.stages[2].prompt[1].content;
    assert!(guidance.contains(&abs.context_summary));
    assert!(!guidance.contains("interlingual approach to MT has been"));
    assert_eq!(m.totals.llm_calls, 3);
    assert_eq!(m.inputs.cassette_digest.as_deref(), Some(replay.cassette().digest()));

    let json = m.to_json().unwrap();
    assert_eq!(RunManifest::from_json(&json).unwrap(), *m);
    let pairs = m.scoring_pairs();
    assert_eq!(pairs.len(), 3);
    assert!(pairs.iter().all(|p| p.method == "gda" && p.seed_text == out.seeds[0].text()));
}

#[test]
fn interlingua_naive_replay_links_parents() {
    let ds = Dataset::load(interlingua_dir()).unwrap();
    let templates = TemplateSet::default();
    let replay = open_replay(interlingua_dir().join("cassette.jsonl")).unwrap();
    let out = Pipeline::new(&ds, &templates)
        .with_backend(&replay)
        .run(&one_seed(Method::Naive))
        .unwrap();
    assert_eq!(out.augmented.len(), 3);
    for s in &out.augmented {
        assert_eq!(s.provenance.origin, Origin::Naive);
        assert_eq!(s.provenance.parent.as_deref(), Some("interlingua:train:0"));
    }
    let prompt = &out.manifest.seed_logs[0].stages[0].prompt[1].content;
    assert!(prompt.contains("\"MT\" (Task)"));
    assert!(!prompt.contains("has been repeatedly advocated"));
}

#[test]
fn rule_methods_fill_the_default_budget() {
    let ds = synthetic_dataset("fin", [1018, 150, 305], &DEFAULT_TYPES, 7);
    let templates = TemplateSet::default();
    let lex = SynonymLexicon::demo();
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Eda, Method::Wordnet] {
        let cfg = RunConfig {
            method,
            ..RunConfig::default()
        };
        let out = Pipeline::new(&ds, &templates).with_lexicon(&lex).run(&cfg).unwrap();
        assert_eq!(out.seeds.len(), 200);
        assert_eq!(out.augmented.len(), 600);
        let path = dir.path().join(format!("{}.conll", method.as_str()));
        let n = export_training_set(&out.seeds, &out.augmented, &ds.entity_type_inventory, &path).unwrap();
        assert_eq!(n, 800);
        let back = parse_conll(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.len(), 800);
        assert!(out.manifest.totals.llm_calls == 0 && out.manifest.inputs.lexicon_digest.is_some());
        // Every seed contributes exactly three sentences, each derived from it.
        for s in &out.augmented {
            let parent = s.provenance.parent.as_deref().unwrap();
            assert!(out.seeds.iter().any(|seed| seed.id == parent));
        }
    }
}

#[test]
fn worker_count_does_not_change_outputs() {
    let ds = synthetic_dataset("fin", [120, 0, 0], &DEFAULT_TYPES, 2);
    let templates = TemplateSet::default();
    let backend = synthetic_backend(ds.entity_type_inventory.clone());
    let cfg = RunConfig {
        seed_count: 40,
        target_augmented: 120,
        ..RunConfig::default()
    };
    let serial = Pipeline::new(&ds, &templates).with_backend(&backend).run(&cfg).unwrap();
    let parallel = Pipeline::new(&ds, &templates).with_backend(&backend).with_jobs(4).run(&cfg).unwrap();
    assert_eq!(serial.manifest.to_json().unwrap(), parallel.manifest.to_json().unwrap());
    assert_eq!(serial.augmented, parallel.augmented);
}

fn generation(items: &[(&str, &[(&str, &str)])]) -> String {
    let v: Vec<serde_json::Value> = items
        .iter()
        .map(|(s, ents)| {
            serde_json::json!({
                "sentence": s,
                "entities": ents.iter().map(|(t, ty)| serde_json::json!({"text": t, "type": ty})).collect::<Vec<_>>(),
            })
        })
        .collect();
    format!("```json\n{}\n```", serde_json::Value::Array(v))
}

fn abstraction() -> String {
    "```json\n{\"context\": \"markets\", \"structure\": \"short clause\", \"roles\": {\"ORG\": \"a company\", \"Planet\": \"?\"}}\n```"
        .to_string()
}

fn tiny_dataset() -> Dataset {
    let s = Sentence::new(
        "t:train:0",
        ["Acme", "hired", "Li", "Wei", "."],
        vec![EntitySpan::new(0, 1, "ORG"), EntitySpan::new(2, 4, "PER")],
        Provenance::seed(),
    );
    Dataset::new("t", vec![s], Vec::new(), Vec::new())
}

#[test]
fn retries_accumulate_until_enough_sentences() {
    let ds = tiny_dataset();
    let templates = TemplateSet::default();
    let seed = "t:train:0";
    let mock = MockBackend::from_script([
        (format!("gda/seed_generation/{seed}/0"), vec!["sorry, I cannot help".to_string()]),
        (
            format!("gda/seed_generation/{seed}/1"),
            vec![generation(&[("Globex hired Maria Lopez .", &[("Globex", "ORG"), ("Maria Lopez", "PER")])])],
        ),
        (format!("gda/abstraction/{seed}/0"), vec![abstraction()]),
        (
            format!("gda/guidance/{seed}/0"),
            vec![generation(&[
                ("Initech signed with Ann Lee .", &[("Initech", "ORG"), ("Ann Lee", "PER")]),
                ("Nobody here .", &[("Zed", "PER")]),
            ])],
        ),
        (
            format!("gda/guidance/{seed}/1"),
            vec![generation(&[
                ("Hooli named Bo Chen chair .", &[("Hooli", "ORG"), ("Bo Chen", "PER")]),
                ("Acme hired Li Wei .", &[("Acme", "ORG"), ("Li Wei", "PER")]),
            ])],
        ),
    ]);
    let cfg = RunConfig {
        seed_count: 1,
        target_augmented: 2,
        variants_per_seed: 1,
        ..RunConfig::default()
    };
    let out = Pipeline::new(&ds, &templates).with_backend(&mock).run(&cfg).unwrap();
    let log = &out.manifest.seed_logs[0];
    assert_eq!(log.stages[0].attempts.len(), 2);
    assert_eq!(log.stages[0].attempts[0].candidates[0].verdict.code(), "format");
    assert!(log.stages[1].attempts[0].warnings.iter().any(|w| w.contains("Planet")));
    assert_eq!(log.stages[2].attempts.len(), 2);
    // Three accepted across attempts; the copy of the seed is not selected.
    assert_eq!(log.outputs.len(), 3);
    let texts: Vec<String> = out.augmented.iter().map(Sentence::text).collect();
    assert_eq!(texts, ["Initech signed with Ann Lee .", "Hooli named Bo Chen chair ."]);
    assert_eq!(out.manifest.totals.candidates_rejected, 2);
    assert_eq!(out.manifest.totals.llm_calls, 5);
}

#[test]
fn failing_seed_is_skipped_without_touching_others() {
    let ds = synthetic_dataset("fin", [60, 0, 0], &DEFAULT_TYPES, 4);
    let templates = TemplateSet::default();
    let inv = ds.entity_type_inventory.clone();
    let cfg = RunConfig {
        seed_count: 10,
        target_augmented: 20,
        ..RunConfig::default()
    };
    let clean = Pipeline::new(&ds, &templates)
        .with_backend(&synthetic_backend(inv.clone()))
        .run(&cfg)
        .unwrap();
    let victim = clean.seeds[3].id.clone();
    let v = victim.clone();
    let flaky = MockBackend::with_responder(move |req: &CompletionRequest| {
        if req.request_tag.starts_with(&format!("gda/abstraction/{v}/")) {
            Some("no JSON today".into())
        } else {
            synthetic_reply(req, &inv)
        }
    });
    let broken = Pipeline::new(&ds, &templates).with_backend(&flaky).run(&cfg).unwrap();

    let log = |o: &gda_core::pipeline::RunOutput, id: &str| {
        o.manifest.seed_logs.iter().find(|l| l.seed_id == id).unwrap().clone()
    };
    let skipped = log(&broken, &victim);
    assert!(matches!(skipped.status, SeedStatus::Skipped { stage: Stage::Abstraction, .. }));
    assert_eq!(skipped.stages[1].attempts.len(), 3);
    assert!(skipped.outputs.is_empty());
    assert_eq!(broken.manifest.totals.seeds_skipped, 1);
    for s in clean.seeds.iter().filter(|s| s.id != victim) {
        assert_eq!(log(&clean, &s.id), log(&broken, &s.id));
    }
    assert_eq!(broken.augmented.len(), 20);
}

#[test]
fn surplus_candidates_cover_a_skipped_seed() {
    let ds = synthetic_dataset("fin", [60, 0, 0], &DEFAULT_TYPES, 4);
    let templates = TemplateSet::default();
    let inv = ds.entity_type_inventory.clone();
    let cfg = RunConfig {
        seed_count: 10,
        target_augmented: 30,
        ..RunConfig::default()
    };
    let seeds = gda_core::corpus::sample_seeds(&ds, 10, cfg.rng_seed).unwrap();
    let victim = seeds[6].id.clone();
    let v = victim.clone();
    let flaky = MockBackend::with_responder(move |req: &CompletionRequest| {
        if req.request_tag.starts_with(&format!("gda/guidance/{v}/")) {
            Some(generation(&[("Mars bought Venus .", &[("Mars", "Planet")])]))
        } else {
            synthetic_reply(req, &inv)
        }
    });
    let out = Pipeline::new(&ds, &templates).with_backend(&flaky).run(&cfg).unwrap();
    assert_eq!(out.augmented.len(), 30);
    let log = out.manifest.seed_logs.iter().find(|l| l.seed_id == victim).unwrap();
    assert!(matches!(log.status, SeedStatus::Skipped { stage: Stage::Guidance, .. }));
    assert_eq!(log.stages[2].attempts.len(), 1 + cfg.max_retries);
    let mut per_seed = std::collections::HashMap::new();
    for s in &out.manifest.selected {
        *per_seed.entry(s.chain_seed_id.as_str()).or_insert(0) += 1;
    }
    assert!(!per_seed.contains_key(victim.as_str()));
    assert_eq!(per_seed.len(), 9);
    // Three seeds give a fourth sentence to make up the budget.
    assert_eq!(per_seed.values().filter(|&&n| n == 4).count(), 3);
}

#[test]
fn abstraction_quoting_the_seed_is_rejected() {
    let ds = tiny_dataset();
    let templates = TemplateSet::default();
    let seed = "t:train:0";
    let leaky = "```json\n{\"context\": \"Acme hired Li Wei .\", \"structure\": \"s\", \"roles\": {\"ORG\": \"c\"}}\n```";
    let mock = MockBackend::from_script([
        (
            format!("gda/seed_generation/{seed}/0"),
            vec![generation(&[("Globex hired Maria Lopez .", &[("Globex", "ORG"), ("Maria Lopez", "PER")])])],
        ),
        (format!("gda/abstraction/{seed}/0"), vec![leaky.to_string()]),
        (format!("gda/abstraction/{seed}/1"), vec![abstraction()]),
        (
            format!("gda/guidance/{seed}/0"),
            vec![generation(&[("Initech signed with Ann Lee .", &[("Initech", "ORG"), ("Ann Lee", "PER")])])],
        ),
    ]);
    let cfg = RunConfig {
        seed_count: 1,
        target_augmented: 1,
        per_seed_candidates: 1,
        variants_per_seed: 1,
        ..RunConfig::default()
    };
    let out = Pipeline::new(&ds, &templates).with_backend(&mock).run(&cfg).unwrap();
    let abs_stage = &out.manifest.seed_logs[0].stages[1];
    assert_eq!(abs_stage.attempts.len(), 2);
    assert!(abs_stage.attempts[0].error.as_deref().unwrap().contains("seed"));
}

#[test]
fn shortfall_and_backend_errors() {
    let ds = synthetic_dataset("fin", [30, 0, 0], &DEFAULT_TYPES, 5);
    let templates = TemplateSet::default();
    let backend = synthetic_backend(ds.entity_type_inventory.clone());
    let cfg = RunConfig {
        seed_count: 5,
        target_augmented: 21,
        ..RunConfig::default()
    };
    match Pipeline::new(&ds, &templates).with_backend(&backend).run(&cfg) {
        Err(e @ Error::Shortfall { .. }) => {
            assert!(e.is_shortfall());
            let Error::Shortfall { target, available, seeds_covered, .. } = e else { unreachable!() };
            assert_eq!((target, available, seeds_covered), (21, 20, 5));
        }
        other => panic!("{other:?}"),
    }

    let empty = MockBackend::from_script(Vec::<(String, Vec<String>)>::new());
    let err = Pipeline::new(&ds, &templates).with_backend(&empty).run(&cfg).unwrap_err();
    assert!(err.is_backend(), "{err}");

    let no_backend = Pipeline::new(&ds, &templates).run(&cfg).unwrap_err();
    assert!(matches!(no_backend, Error::Config(_)));
}

#[test]
fn export_rechecks_sentences() {
    let inv = inventory();
    let dir = tempfile::tempdir().unwrap();
    let good = Sentence::new("a", ["x", "y"], vec![EntitySpan::new(0, 1, "PER")], Provenance::seed());
    let bad_type = Sentence::new(
        "gda:a:0",
        ["x"],
        vec![EntitySpan::new(0, 1, "Planet")],
        Provenance::derived(Origin::Gda, None),
    );
    let path = dir.path().join("e.conll");
    let good = std::slice::from_ref(&good);
    assert!(export_training_set(good, &[bad_type], &inv, &path).is_err());
    assert!(export_training_set(good, good, &inv, &path).is_err());
    assert_eq!(export_training_set(good, &[], &inv, &path).unwrap(), 1);
    let first = std::fs::read(&path).unwrap();
    export_training_set(good, &[], &inv, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn manifest_validation_catches_tampering() {
    let ds = Dataset::load(interlingua_dir()).unwrap();
    let templates = TemplateSet::default();
    let replay = open_replay(interlingua_dir().join("cassette.jsonl")).unwrap();
    let out = Pipeline::new(&ds, &templates).with_backend(&replay).run(&one_seed(Method::Gda)).unwrap();
    let json = out.manifest.to_json().unwrap();

    let mut m = out.manifest.clone();
    m.selected[1].text.push_str(" extra");
    assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    let mut m = out.manifest.clone();
    m.selected.pop();
    assert!(m.validate().is_err());
    let mut m = out.manifest.clone();
    m.selected[2] = m.selected[0].clone();
    assert!(m.validate().is_err());

    let extra = json.replacen("\"format_version\"", "\"surprise\": 1,\n  \"format_version\"", 1);
    assert!(RunManifest::from_json(&extra).is_err());
    assert!(!json.contains("sk-") && !json.to_lowercase().contains("api_key"));
}

fn pool_sentence(seed: usize, k: usize, text: &str) -> Sentence {
    Sentence::new(
        format!("x:{seed}:{k}"),
        text.split(' ').collect::<Vec<_>>(),
        Vec::new(),
        Provenance::derived(Origin::Eda, Some(format!("s{seed}"))),
    )
}

/// Reference selection: rank every surviving sentence by (round, seed),
/// keep the first `target`, then group by seed.
fn oracle_select(pools: &[Vec<Sentence>], excluded: &HashSet<String>, target: usize) -> Option<Vec<String>> {
    let mut seen = excluded.clone();
    let mut ranked = Vec::new();
    for (seed, pool) in pools.iter().enumerate() {
        let mut round = 0;
        for s in pool {
            if seen.insert(normalize_text(&s.text())) {
                ranked.push((round, seed, s.id.clone()));
                round += 1;
            }
        }
    }
    if ranked.len() < target {
        return None;
    }
    ranked.sort();
    let mut chosen: Vec<(usize, usize, String)> = ranked.into_iter().take(target).collect();
    chosen.sort_by_key(|(round, seed, _)| (*seed, *round));
    Some(chosen.into_iter().map(|(_, _, id)| id).collect())
}

/// Best achievable (seeds covered, -largest per-seed share) over every
/// size-`target` subset of the deduplicated pools.
fn brute_force_coverage(pools: &[Vec<Sentence>], target: usize) -> Option<(usize, isize)> {
    let mut seen = HashSet::new();
    let owners: Vec<usize> = pools
        .iter()
        .enumerate()
        .flat_map(|(seed, pool)| pool.iter().map(move |s| (seed, s)))
        .filter(|(_, s)| seen.insert(normalize_text(&s.text())))
        .map(|(seed, _)| seed)
        .collect();
    let mut best = None;
    for mask in 0u32..1 << owners.len() {
        if mask.count_ones() as usize != target {
            continue;
        }
        let mut per_seed = vec![0isize; pools.len()];
        for (i, &seed) in owners.iter().enumerate() {
            if mask >> i & 1 == 1 {
                per_seed[seed] += 1;
            }
        }
        let covered = per_seed.iter().filter(|&&n| n > 0).count();
        let score = (covered, -per_seed.iter().copied().max().unwrap_or(0));
        best = best.max(Some(score));
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn selection_matches_round_robin_oracle(
        pools in prop::collection::vec(prop::collection::vec("[ab]( [aB]){0,2}", 0..6), 1..8),
        excluded in prop::collection::hash_set("[ab]( [ab]){0,2}", 0..3),
        target in 0usize..30,
    ) {
        let pools: Vec<Vec<Sentence>> = pools
            .iter()
            .enumerate()
            .map(|(i, p)| p.iter().enumerate().map(|(k, t)| pool_sentence(i, k, t)).collect())
            .collect();
        let excluded: HashSet<String> = excluded.iter().map(|t| normalize_text(t)).collect();
        let policy = RoundRobin { keep_duplicates: false, excluded: excluded.clone() };
        let got = policy.select(&pools, target);
        match oracle_select(&pools, &excluded, target) {
            None => {
                let is_shortfall = matches!(got, Err(Error::Shortfall { .. }));
                prop_assert!(is_shortfall);
            }
            Some(ids) => {
                let got = got.unwrap();
                prop_assert_eq!(got.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), ids);
                let texts: HashSet<String> = got.iter().map(|s| normalize_text(&s.text())).collect();
                prop_assert_eq!(texts.len(), got.len());
                prop_assert!(texts.is_disjoint(&excluded));
            }
        }
    }

    #[test]
    fn round_robin_maximizes_seed_coverage(
        pools in prop::collection::vec(prop::collection::vec("[abc]( [ab]){0,1}", 0..4), 1..=10)
            .prop_filter("small enough to enumerate", |p| p.iter().map(Vec::len).sum::<usize>() <= 14),
        target in 0usize..10,
    ) {
        let pools: Vec<Vec<Sentence>> = pools
            .iter()
            .enumerate()
            .map(|(i, p)| p.iter().enumerate().map(|(k, t)| pool_sentence(i, k, t)).collect())
            .collect();
        let got = select_responses(&pools, target);
        match brute_force_coverage(&pools, target) {
            None => prop_assert!(got.is_err()),
            Some(best) => {
                let got = got.unwrap();
                let mut per_seed = vec![0isize; pools.len()];
                for s in &got {
                    let seed: usize = s.provenance.parent.as_deref().unwrap()[1..].parse().unwrap();
                    per_seed[seed] += 1;
                }
                let covered = per_seed.iter().filter(|&&n| n > 0).count();
                prop_assert_eq!((covered, -per_seed.iter().copied().max().unwrap_or(0)), best);
            }
        }
    }

    #[test]
    fn selection_keeping_duplicates_only_counts(sizes in prop::collection::vec(0usize..5, 1..10), target in 0usize..40) {
        let pools: Vec<Vec<Sentence>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (0..n).map(|k| pool_sentence(i, k, "same text")).collect())
            .collect();
        let total: usize = sizes.iter().sum();
        let policy = RoundRobin { keep_duplicates: true, ..RoundRobin::default() };
        match policy.select(&pools, target) {
            Ok(v) => {
                prop_assert!(target <= total);
                prop_assert_eq!(v.len(), target);
                // Seeds covered is as large as the budget allows.
                let covered: HashSet<&str> = v.iter().map(|s| s.provenance.parent.as_deref().unwrap()).collect();
                prop_assert_eq!(covered.len(), target.min(sizes.iter().filter(|&&n| n > 0).count()));
            }
            Err(_) => prop_assert!(target > total),
        }
        if target <= 1 {
            prop_assert_eq!(select_responses(&pools, 0).unwrap().len(), 0);
        }
    }
}
