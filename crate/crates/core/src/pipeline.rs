//! Augmentation runs: seed sampling, per-seed generation stages with
//! validation and retries, response selection under a budget, and the run
//! manifest that makes a run auditable and replayable.
//!
//! Seeds are processed independently (optionally in parallel); everything
//! that spans seeds is assembled afterwards in seed order, so the worker
//! count never changes the output.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{augmented_id, sample_seeds, serialize_conll, Dataset, Origin, Provenance, Sentence};
use crate::diversity::ScoringPair;
use crate::error::{Error, Result};
use crate::llm::{self, CompletionBackend, CompletionRequest, Message, Usage};
use crate::prompt::{
    self, parse_abstraction, parse_candidates, AbstractionRecord, ClaimedEntity, TemplateSet, Verdict,
};
use crate::rng::sha256_hex;
use crate::rule_augment::{eda_augment, wordnet_augment, EdaConfig, SynonymLexicon};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gda,
    Naive,
    Eda,
    Wordnet,
}

impl Method {
    pub fn origin(self) -> Origin {
        match self {
            Method::Gda => Origin::Gda,
            Method::Naive => Origin::Naive,
            Method::Eda => Origin::Eda,
            Method::Wordnet => Origin::Wordnet,
        }
    }

    pub fn uses_llm(self) -> bool {
        matches!(self, Method::Gda | Method::Naive)
    }

    pub fn as_str(self) -> &'static str {
        self.origin().as_str()
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gda" => Ok(Method::Gda),
            "naive" => Ok(Method::Naive),
            "eda" => Ok(Method::Eda),
            "wordnet" => Ok(Method::Wordnet),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Record,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed_count: usize,
    pub target_augmented: usize,
    /// Sentences requested per seed (LLM methods) or produced per seed (rule methods).
    pub per_seed_candidates: usize,
    /// Entity-swapped variants requested in the first GDA stage.
    pub variants_per_seed: usize,
    /// Retries after the first attempt of each LLM stage.
    pub max_retries: usize,
    pub model_id: String,
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    pub rng_seed: u64,
    pub backend: BackendMode,
    pub eda: EdaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Gda,
            seed_count: 200,
            target_augmented: 600,
            per_seed_candidates: 3,
            variants_per_seed: 3,
            max_retries: 2,
            model_id: llm::DEFAULT_MODEL.to_string(),
            temperature: llm::DEFAULT_TEMPERATURE,
            max_tokens: None,
            rng_seed: 42,
            backend: BackendMode::Replay,
            eda: EdaConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_seed_candidates == 0 {
            return Err(Error::Config("per_seed_candidates must be at least 1".into()));
        }
        if self.variants_per_seed == 0 {
            return Err(Error::Config("variants_per_seed must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        self.eda.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SeedGeneration,
    Abstraction,
    Guidance,
    Naive,
    Rule,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::SeedGeneration => "seed_generation",
            Stage::Abstraction => "abstraction",
            Stage::Guidance => "guidance",
            Stage::Naive => "naive",
            Stage::Rule => "rule",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLog {
    pub text: String,
    pub entities: Vec<ClaimedEntity>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttemptLog {
    pub request_tag: String,
    pub fingerprint: String,
    pub completion: String,
    pub usage: Usage,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLog {
    pub stage: Stage,
    pub prompt: Vec<Message>,
    pub attempts: Vec<AttemptLog>,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeedStatus {
    Completed,
    Skipped { stage: Stage, reason: String },
}

/// An augmented sentence produced for one seed, accepted by validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputEntry {
    pub id: String,
    pub text: String,
    pub entities: Vec<ClaimedEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedLog {
    pub seed_id: String,
    pub status: SeedStatus,
    pub stages: Vec<StageLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstraction: Option<AbstractionRecord>,
    pub outputs: Vec<OutputEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedEntry {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedEntry {
    pub id: String,
    /// Seed whose generation chain produced this sentence.
    pub chain_seed_id: String,
    /// Parent recorded on the sentence itself; absent for guidance outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDigests {
    pub dataset: String,
    pub train_sentences: usize,
    pub train_digest: String,
    pub inventory: Vec<String>,
    pub template_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_digest: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Totals {
    pub llm_calls: u64,
    pub usage: Usage,
    /// Sum of backend-reported latencies; replayed runs report the recorded values.
    pub recorded_latency_ms: u64,
    pub outputs_accepted: u64,
    pub candidates_rejected: u64,
    pub seeds_skipped: u64,
}

/// Complete record of one run. Contains no wall-clock timestamps so a
/// replayed run reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub generator: String,
    pub config: RunConfig,
    pub inputs: InputDigests,
    pub seeds: Vec<SeedEntry>,
    pub seed_logs: Vec<SeedLog>,
    pub selected: Vec<SelectedEntry>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and checks a manifest: unknown fields are rejected and the
    /// structural invariants of [`RunManifest::validate`] must hold.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Manifest(m));
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return fail(format!("unsupported format version {}", self.format_version));
        }
        if self.selected.len() != self.config.target_augmented {
            return fail(format!(
                "{} sentences selected for a target of {}",
                self.selected.len(),
                self.config.target_augmented
            ));
        }
        if self.seed_logs.len() != self.seeds.len()
            || self.seed_logs.iter().zip(&self.seeds).any(|(l, s)| l.seed_id != s.id)
        {
            return fail("seed logs do not line up with the seed list".into());
        }
        let mut outputs: HashMap<&str, (&str, &str)> = HashMap::new();
        for log in &self.seed_logs {
            for o in &log.outputs {
                if outputs.insert(&o.id, (&log.seed_id, &o.text)).is_some() {
                    return fail(format!("output id {} appears twice", o.id));
                }
            }
        }
        let mut seen = HashSet::new();
        for s in &self.selected {
            if !seen.insert(s.id.as_str()) {
                return fail(format!("sentence {} selected twice", s.id));
            }
            match outputs.get(s.id.as_str()) {
                Some((seed, text)) if *seed == s.chain_seed_id && *text == s.text => {}
                Some(_) => return fail(format!("selected {} disagrees with its seed log", s.id)),
                None => return fail(format!("selected {} has no accepted output", s.id)),
            }
        }
        Ok(())
    }

    /// Seed/augmentation pairs for diversity scoring.
    pub fn scoring_pairs(&self) -> Vec<ScoringPair> {
        let seeds: HashMap<&str, &str> = self
            .seeds
            .iter()
            .map(|s| (s.id.as_str(), s.text.as_str()))
            .collect();
        self.selected
            .iter()
            .filter_map(|s| {
                seeds.get(s.chain_seed_id.as_str()).map(|seed_text| ScoringPair {
                    method: self.config.method.as_str().to_string(),
                    seed_id: s.chain_seed_id.clone(),
                    aug_id: s.id.clone(),
                    seed_text: seed_text.to_string(),
                    aug_text: s.text.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seeds: Vec<Sentence>,
    pub augmented: Vec<Sentence>,
    pub manifest: RunManifest,
}

/// Lowercased, whitespace-collapsed text used for duplicate detection.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Chooses `target` sentences from per-seed pools.
pub trait SelectionPolicy: Sync {
    fn select(&self, pools: &[Vec<Sentence>], target: usize) -> Result<Vec<Sentence>>;
}

/// Dedupe (optional), then take one sentence per seed per round, seeds in
/// order and each seed's sentences in generation order, until the target is
/// met. The result is grouped by seed.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    pub keep_duplicates: bool,
    /// Normalized texts that may not be selected (typically the seeds).
    pub excluded: HashSet<String>,
}

impl SelectionPolicy for RoundRobin {
    fn select(&self, pools: &[Vec<Sentence>], target: usize) -> Result<Vec<Sentence>> {
        let mut seen = self.excluded.clone();
        let pools: Vec<Vec<&Sentence>> = pools
            .iter()
            .map(|pool| {
                pool.iter()
                    .filter(|s| self.keep_duplicates || seen.insert(normalize_text(&s.text())))
                    .collect()
            })
            .collect();
        let available: usize = pools.iter().map(Vec::len).sum();
        if available < target {
            return Err(Error::Shortfall {
                target,
                available,
                seeds_covered: pools.iter().filter(|p| !p.is_empty()).count(),
                seeds_skipped: pools.iter().filter(|p| p.is_empty()).count(),
            });
        }
        let mut taken = vec![0usize; pools.len()];
        let mut count = 0;
        let mut round = 0;
        while count < target {
            for (i, pool) in pools.iter().enumerate() {
                if count == target {
                    break;
                }
                if round < pool.len() {
                    taken[i] += 1;
                    count += 1;
                }
            }
            round += 1;
        }
        Ok(pools
            .iter()
            .zip(&taken)
            .flat_map(|(pool, &n)| pool[..n].iter().map(|s| (*s).clone()))
            .collect())
    }
}

/// Default selection: dedupe by normalized text, then seed-order round robin.
pub fn select_responses(pools: &[Vec<Sentence>], target: usize) -> Result<Vec<Sentence>> {
    RoundRobin::default().select(pools, target)
}

/// Writes seeds followed by augmented sentences as CoNLL. Every sentence is
/// re-validated against `inventory` and ids must be unique. Returns the
/// number of sentences written.
pub fn export_training_set(
    seeds: &[Sentence],
    augmented: &[Sentence],
    inventory: &[String],
    path: impl AsRef<Path>,
) -> Result<usize> {
    let mut ids = HashSet::new();
    for s in seeds.iter().chain(augmented) {
        s.validate(Some(inventory))?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::InvalidSentence {
                id: s.id.clone(),
                message: "duplicate id in export".into(),
            });
        }
    }
    let all: Vec<Sentence> = seeds.iter().chain(augmented).cloned().collect();
    let path = path.as_ref();
    fs::write(path, serialize_conll(&all)).map_err(|e| Error::io(path, e))?;
    Ok(all.len())
}

struct SeedResult {
    log: SeedLog,
    pool: Vec<Sentence>,
}

/// Runs one method over a dataset.
pub struct Pipeline<'a> {
    dataset: &'a Dataset,
    templates: &'a TemplateSet,
    lexicon: Option<&'a SynonymLexicon>,
    backend: Option<&'a dyn CompletionBackend>,
    cassette_digest: Option<String>,
    jobs: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(dataset: &'a Dataset, templates: &'a TemplateSet) -> Self {
        Self {
            dataset,
            templates,
            lexicon: None,
            backend: None,
            cassette_digest: None,
            jobs: 1,
        }
    }

    pub fn with_backend(mut self, backend: &'a dyn CompletionBackend) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn with_lexicon(mut self, lexicon: &'a SynonymLexicon) -> Self {
        self.lexicon = Some(lexicon);
        self
    }

    /// Digest of the cassette a replayed run reads, recorded in the manifest.
    pub fn with_cassette_digest(mut self, digest: impl Into<String>) -> Self {
        self.cassette_digest = Some(digest.into());
        self
    }

    /// Worker count for per-seed processing; has no effect on outputs.
    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn run(&self, config: &RunConfig) -> Result<RunOutput> {
        match config.method {
            Method::Gda => self.run_gda(config),
            Method::Naive => self.run_naive(config),
            Method::Eda | Method::Wordnet => self.run_rule(config),
        }
    }

    pub fn run_gda(&self, config: &RunConfig) -> Result<RunOutput> {
        self.execute(config, Method::Gda)
    }

    pub fn run_naive(&self, config: &RunConfig) -> Result<RunOutput> {
        self.execute(config, Method::Naive)
    }

    pub fn run_rule(&self, config: &RunConfig) -> Result<RunOutput> {
        if config.method.uses_llm() {
            return Err(Error::Config(format!(
                "run_rule called with LLM method {}",
                config.method.as_str()
            )));
        }
        self.execute(config, config.method)
    }

    fn execute(&self, config: &RunConfig, method: Method) -> Result<RunOutput> {
        let mut config = config.clone();
        config.method = method;
        config.validate()?;
        let backend = match (method.uses_llm(), self.backend) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "method {} needs a completion backend",
                    method.as_str()
                )))
            }
            (_, b) => b,
        };
        let lexicon_owned;
        let lexicon = match self.lexicon {
            Some(l) => l,
            None => {
                lexicon_owned = SynonymLexicon::new();
                &lexicon_owned
            }
        };
        let seeds = sample_seeds(self.dataset, config.seed_count, config.rng_seed)?;
        let inventory = &self.dataset.entity_type_inventory;

        let process = |seed: &Sentence| -> Result<SeedResult> {
            match method {
                Method::Gda => SeedRun::new(&config, backend.expect("checked"), self.templates, inventory, seed).gda(),
                Method::Naive => SeedRun::new(&config, backend.expect("checked"), self.templates, inventory, seed).naive(),
                Method::Eda | Method::Wordnet => rule_seed(&config, lexicon, seed),
            }
        };
        let results: Vec<SeedResult> = if self.jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            pool.install(|| seeds.par_iter().map(process).collect::<Result<Vec<_>>>())?
        } else {
            seeds.iter().map(process).collect::<Result<Vec<_>>>()?
        };

        let (logs, pools): (Vec<SeedLog>, Vec<Vec<Sentence>>) =
            results.into_iter().map(|r| (r.log, r.pool)).unzip();

        let policy = RoundRobin {
            keep_duplicates: !method.uses_llm(),
            excluded: if method.uses_llm() {
                seeds.iter().map(|s| normalize_text(&s.text())).collect()
            } else {
                HashSet::new()
            },
        };
        let mut selected = policy.select(&pools, config.target_augmented)?;
        for s in &mut selected {
            s.validate(Some(inventory))?;
        }

        let chain_of: HashMap<&str, &str> = logs
            .iter()
            .flat_map(|l| l.outputs.iter().map(move |o| (o.id.as_str(), l.seed_id.as_str())))
            .collect();
        let selected_entries = selected
            .iter()
            .map(|s| SelectedEntry {
                id: s.id.clone(),
                chain_seed_id: chain_of[s.id.as_str()].to_string(),
                parent_id: s.provenance.parent.clone(),
                text: s.text(),
            })
            .collect();

        let mut totals = Totals::default();
        for log in &logs {
            if matches!(log.status, SeedStatus::Skipped { .. }) {
                totals.seeds_skipped += 1;
            }
            totals.outputs_accepted += log.outputs.len() as u64;
            for stage in &log.stages {
                for a in &stage.attempts {
                    if stage.stage != Stage::Rule {
                        totals.llm_calls += 1;
                    }
                    totals.usage += a.usage;
                    totals.recorded_latency_ms += a.latency_ms;
                    totals.candidates_rejected +=
                        a.candidates.iter().filter(|c| !c.verdict.is_accepted()).count() as u64;
                }
            }
        }

        let manifest = RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            generator: format!("gda-core {}", env!("CARGO_PKG_VERSION")),
            inputs: InputDigests {
                dataset: self.dataset.name.clone(),
                train_sentences: self.dataset.train.len(),
                train_digest: sha256_hex(serialize_conll(&self.dataset.train)),
                inventory: inventory.clone(),
                template_hash: self.templates.hash(),
                lexicon_digest: (!method.uses_llm())
                    .then(|| lexicon_digest(lexicon)),
                cassette_digest: self.cassette_digest.clone(),
            },
            config,
            seeds: seeds
                .iter()
                .map(|s| SeedEntry {
                    id: s.id.clone(),
                    text: s.text(),
                })
                .collect(),
            seed_logs: logs,
            selected: selected_entries,
            totals,
            warnings: Vec::new(),
        };
        manifest.validate()?;
        Ok(RunOutput {
            seeds,
            augmented: selected,
            manifest,
        })
    }
}

fn lexicon_digest(lexicon: &SynonymLexicon) -> String {
    // Entries iterate in sorted order, so this listing is canonical.
    let rows: Vec<String> = lexicon
        .entries()
        .map(|(lemma, syns)| format!("{lemma}\t{}", syns.join("|")))
        .collect();
    sha256_hex(rows.join("\n"))
}

fn claimed_of(sentence: &Sentence) -> Vec<ClaimedEntity> {
    sentence
        .entities
        .iter()
        .map(|e| ClaimedEntity {
            text: sentence.surface(e),
            entity_type: e.entity_type.clone(),
        })
        .collect()
}

fn rule_seed(config: &RunConfig, lexicon: &SynonymLexicon, seed: &Sentence) -> Result<SeedResult> {
    let aug = match config.method {
        Method::Eda => {
            let cfg = EdaConfig {
                n_aug: config.per_seed_candidates,
                ..config.eda.clone()
            };
            eda_augment(seed, lexicon, &cfg, config.rng_seed)?
        }
        _ => wordnet_augment(
            seed,
            lexicon,
            config.per_seed_candidates,
            config.eda.synonym_pool,
            config.rng_seed,
        )?,
    };
    let warnings = aug.warnings.iter().map(|w| w.as_str().to_string()).collect();
    Ok(SeedResult {
        log: SeedLog {
            seed_id: seed.id.clone(),
            status: SeedStatus::Completed,
            stages: Vec::new(),
            abstraction: None,
            outputs: aug
                .sentences
                .iter()
                .map(|s| OutputEntry {
                    id: s.id.clone(),
                    text: s.text(),
                    entities: claimed_of(s),
                })
                .collect(),
            warnings,
        },
        pool: aug.sentences,
    })
}

/// Per-seed LLM chain state.
struct SeedRun<'r> {
    config: &'r RunConfig,
    backend: &'r dyn CompletionBackend,
    templates: &'r TemplateSet,
    inventory: &'r [String],
    seed: &'r Sentence,
    stages: Vec<StageLog>,
}

enum StageOutcome<T> {
    Done(T),
    Exhausted(String),
}

impl<'r> SeedRun<'r> {
    fn new(
        config: &'r RunConfig,
        backend: &'r dyn CompletionBackend,
        templates: &'r TemplateSet,
        inventory: &'r [String],
        seed: &'r Sentence,
    ) -> Self {
        Self {
            config,
            backend,
            templates,
            inventory,
            seed,
            stages: Vec::new(),
        }
    }

    /// Calls the backend up to `1 + max_retries` times. `judge` inspects each
    /// reply and returns `Ok(true)` once the stage is satisfied; `Err` marks
    /// the attempt as failed with a reason. Backend errors abort the run.
    fn stage<F>(&mut self, stage: Stage, prompt: Vec<Message>, mut judge: F) -> Result<StageOutcome<()>>
    where
        F: FnMut(&str, &mut AttemptLog) -> std::result::Result<bool, String>,
    {
        let mut log = StageLog {
            stage,
            prompt,
            attempts: Vec::new(),
            succeeded: false,
        };
        let mut last_reason = String::new();
        for attempt in 0..=self.config.max_retries {
            let request = CompletionRequest {
                model_id: self.config.model_id.clone(),
                messages: log.prompt.clone(),
                temperature: self.config.temperature,
                max_tokens: self.config.max_tokens,
                request_tag: format!(
                    "{}/{}/{}/{attempt}",
                    self.config.method.as_str(),
                    stage.as_str(),
                    self.seed.id
                ),
            };
            let result = self.backend.complete(&request)?;
            let mut entry = AttemptLog {
                request_tag: request.request_tag.clone(),
                fingerprint: request.fingerprint(),
                completion: result.text.clone(),
                usage: result.usage,
                latency_ms: result.latency_ms,
                candidates: Vec::new(),
                error: None,
                warnings: Vec::new(),
            };
            let verdict = judge(&result.text, &mut entry);
            match verdict {
                Ok(done) => {
                    log.attempts.push(entry);
                    if done {
                        log.succeeded = true;
                        break;
                    }
                    last_reason = "not enough accepted sentences".into();
                }
                Err(reason) => {
                    entry.error = Some(reason.clone());
                    log.attempts.push(entry);
                    last_reason = reason;
                }
            }
        }
        let succeeded = log.succeeded;
        self.stages.push(log);
        Ok(if succeeded {
            StageOutcome::Done(())
        } else {
            StageOutcome::Exhausted(last_reason)
        })
    }

    /// Generation stage collecting accepted sentences across attempts until
    /// `want` are available.
    fn generate(&mut self, stage: Stage, prompt: Vec<Message>, want: usize) -> Result<StageOutcome<Vec<Sentence>>> {
        let mut accepted: Vec<Sentence> = Vec::new();
        let inventory = self.inventory;
        let outcome = self.stage(stage, prompt, |reply, entry| {
            let candidates = parse_candidates(reply, inventory);
            for c in &candidates {
                entry.candidates.push(CandidateLog {
                    text: if c.sentence.is_empty() {
                        c.raw_text.clone()
                    } else {
                        c.sentence.text()
                    },
                    entities: c.claimed_entities.clone(),
                    verdict: c.verdict.clone(),
                });
            }
            accepted.extend(
                candidates
                    .into_iter()
                    .filter(|c| c.verdict.is_accepted())
                    .map(|c| c.sentence),
            );
            if accepted.is_empty() {
                return Err("no accepted sentences".into());
            }
            Ok(accepted.len() >= want)
        })?;
        Ok(match outcome {
            StageOutcome::Done(()) => StageOutcome::Done(accepted),
            // Partial success still yields whatever was accepted.
            StageOutcome::Exhausted(_) if !accepted.is_empty() => {
                if let Some(last) = self.stages.last_mut() {
                    last.succeeded = true;
                }
                StageOutcome::Done(accepted)
            }
            StageOutcome::Exhausted(reason) => StageOutcome::Exhausted(reason),
        })
    }

    fn finish(self, status: SeedStatus, abstraction: Option<AbstractionRecord>, outputs: Vec<Sentence>) -> SeedResult {
        SeedResult {
            log: SeedLog {
                seed_id: self.seed.id.clone(),
                status,
                stages: self.stages,
                abstraction,
                outputs: outputs
                    .iter()
                    .map(|s| OutputEntry {
                        id: s.id.clone(),
                        text: s.text(),
                        entities: claimed_of(s),
                    })
                    .collect(),
                warnings: Vec::new(),
            },
            pool: outputs,
        }
    }

    fn skip(self, stage: Stage, reason: String) -> SeedResult {
        self.finish(SeedStatus::Skipped { stage, reason }, None, Vec::new())
    }

    fn finalize(&self, sentences: Vec<Sentence>, origin: Origin, parent: Option<&str>) -> Vec<Sentence> {
        sentences
            .into_iter()
            .enumerate()
            .map(|(k, mut s)| {
                s.id = augmented_id(origin, &self.seed.id, k);
                s.provenance = Provenance::derived(origin, parent.map(str::to_string));
                s
            })
            .collect()
    }

    fn gda(mut self) -> Result<SeedResult> {
        let seed = self.seed;
        let prompt = match prompt::build_seed_generation_prompt(self.templates, seed, self.config.variants_per_seed) {
            Ok(p) => p,
            Err(e) => return Ok(self.skip(Stage::SeedGeneration, e.to_string())),
        };
        let variants = match self.generate(Stage::SeedGeneration, prompt, self.config.variants_per_seed)? {
            StageOutcome::Done(v) => v,
            StageOutcome::Exhausted(reason) => return Ok(self.skip(Stage::SeedGeneration, reason)),
        };

        let prompt = prompt::build_abstraction_prompt(self.templates, seed, &variants, self.inventory)?;
        let inventory = self.inventory;
        let seed_text = normalize_text(&seed.text());
        let mut record: Option<AbstractionRecord> = None;
        let outcome = self.stage(Stage::Abstraction, prompt, |reply, entry| {
            let (mut rec, warnings) = parse_abstraction(reply, inventory).map_err(|e| e.to_string())?;
            entry.warnings = warnings;
            let leaks = [&rec.context_summary, &rec.structure_description]
                .into_iter()
                .chain(rec.entity_roles.values())
                .any(|t| normalize_text(t).contains(&seed_text));
            if leaks {
                return Err("abstraction quotes the seed sentence".into());
            }
            rec.source_seed_ids = vec![seed.id.clone()];
            record = Some(rec);
            Ok(true)
        })?;
        let record = match (outcome, record) {
            (StageOutcome::Done(()), Some(r)) => r,
            (StageOutcome::Exhausted(reason), _) => return Ok(self.skip(Stage::Abstraction, reason)),
            (StageOutcome::Done(()), None) => {
                return Ok(self.skip(Stage::Abstraction, "no abstraction recorded".into()))
            }
        };

        let prompt = prompt::build_guidance_prompt(self.templates, &record, self.inventory, self.config.per_seed_candidates)?;
        match self.generate(Stage::Guidance, prompt, self.config.per_seed_candidates)? {
            StageOutcome::Done(sentences) => {
                let outputs = self.finalize(sentences, Origin::Gda, None);
                Ok(self.finish(SeedStatus::Completed, Some(record), outputs))
            }
            StageOutcome::Exhausted(reason) => Ok(self.finish(
                SeedStatus::Skipped {
                    stage: Stage::Guidance,
                    reason,
                },
                Some(record),
                Vec::new(),
            )),
        }
    }

    fn naive(mut self) -> Result<SeedResult> {
        let prompt = match prompt::build_naive_prompt(self.templates, self.seed, self.config.per_seed_candidates) {
            Ok(p) => p,
            Err(e) => return Ok(self.skip(Stage::Naive, e.to_string())),
        };
        match self.generate(Stage::Naive, prompt, self.config.per_seed_candidates)? {
            StageOutcome::Done(sentences) => {
                let parent = self.seed.id.clone();
                let outputs = self.finalize(sentences, Origin::Naive, Some(&parent));
                Ok(self.finish(SeedStatus::Completed, None, outputs))
            }
            StageOutcome::Exhausted(reason) => Ok(self.skip(Stage::Naive, reason)),
        }
    }
}
