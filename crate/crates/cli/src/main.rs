use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gda_core::corpus::Dataset;
use gda_core::diversity::{self, read_pairs_csv, write_pairs_csv, BleuConfig, ScoringPair, Smoothing};
use gda_core::llm::{self, CompletionBackend, LiveBackend, MockBackend};
use gda_core::pipeline::{export_training_set, BackendMode, Method, Pipeline, RunConfig, RunManifest};
use gda_core::prompt::TemplateSet;
use gda_core::results;
use gda_core::rule_augment::SynonymLexicon;
use gda_core::synth;

const EXPORT_FILE: &str = "export.conll";
const MANIFEST_FILE: &str = "manifest.json";
const PAIRS_FILE: &str = "pairs.csv";

#[derive(Parser)]
#[command(name = "gda", version, about = "Guided data augmentation for NER corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a CoNLL corpus and print split sizes and the entity inventory.
    Ingest {
        /// CoNLL file (treated as train) or directory with train/dev/test files.
        path: PathBuf,
        /// Print the summary as JSON.
        #[arg(long)]
        stats: bool,
    },
    /// Run one augmentation method and write the export, manifest and pairs file.
    Augment(Box<AugmentArgs>),
    /// Score seed/augmentation pairs with BLEU-4 and write per-pair and per-method reports.
    Diversity(DiversityArgs),
    /// Summarize trainer result files and compare methods per dataset.
    Results {
        /// Result JSON files (one object, an array, or one object per line).
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Method compared against every other method.
        #[arg(long, default_value = "gda")]
        method: String,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the bundled synonym lexicon as a TSV template.
    ExportLexiconTemplate {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AugmentArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus path (file or split directory).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Augmentation method (default gda).
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Completion backend for LLM methods.
    #[arg(long, visible_alias = "llm-backend", value_enum)]
    backend: Option<BackendArg>,
    /// Cassette JSONL read in replay mode and appended to in record mode.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// JSON object mapping request tags to reply lists, for mock mode.
    /// Without it, mock mode answers with synthetic well-formed replies.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Synonym lexicon TSV for rule methods (defaults to the bundled one).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Directory of prompt templates overriding the bundled ones.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Directory receiving export.conll, manifest.json and pairs.csv.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Base URL of the chat completions API (live and record modes).
    #[arg(long)]
    base_url: Option<String>,
    /// Seeds sampled from the train split (default 200).
    #[arg(long)]
    seed_count: Option<usize>,
    /// Number of augmented sentences to select.
    #[arg(long, visible_alias = "target")]
    target_augmented: Option<usize>,
    /// Sentences requested per seed from the final stage (default 3).
    #[arg(long)]
    per_seed_candidates: Option<usize>,
    /// Entity-swapped variants generated before abstraction (default 3).
    #[arg(long)]
    variants_per_seed: Option<usize>,
    /// Extra attempts per stage after a reply yields nothing usable (default 2).
    #[arg(long)]
    max_retries: Option<usize>,
    /// Chat model identifier sent with every request.
    #[arg(long)]
    model_id: Option<String>,
    /// Sampling temperature (default 1.0).
    #[arg(long)]
    temperature: Option<f64>,
    /// Completion token cap; unset leaves the provider default.
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Seed for sampling and rule-based augmentation (default 42).
    #[arg(long)]
    rng_seed: Option<u64>,
    /// Worker threads for per-seed processing; outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Concurrent requests allowed against the live API.
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Args)]
struct DiversityArgs {
    /// Run manifest; repeat to compare methods.
    #[arg(long = "manifest", required_unless_present = "pairs")]
    manifests: Vec<PathBuf>,
    /// Pairs CSV (method,seed_id,aug_id,seed_text,aug_text); repeatable.
    #[arg(long = "pairs", conflicts_with = "manifests")]
    pairs: Vec<PathBuf>,
    /// Directory receiving bleu_pairs.csv, diversity.json and pairs.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Smoothing for n-gram orders without a match.
    #[arg(long, value_enum, default_value_t = SmoothingArg::Epsilon)]
    smoothing: SmoothingArg,
    /// Epsilon for add-epsilon smoothing.
    #[arg(long, default_value_t = 1e-9)]
    epsilon: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gda,
    Naive,
    Eda,
    Wordnet,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gda => Method::Gda,
            MethodArg::Naive => Method::Naive,
            MethodArg::Eda => Method::Eda,
            MethodArg::Wordnet => Method::Wordnet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Record,
    Replay,
    Mock,
}

impl From<BackendArg> for BackendMode {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Live => BackendMode::Live,
            BackendArg::Record => BackendMode::Record,
            BackendArg::Replay => BackendMode::Replay,
            BackendArg::Mock => BackendMode::Mock,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    None,
    Epsilon,
    Floor,
}

/// Paths and transport settings from the config file. Run parameters live
/// under `[run]` and are checked against [`RunConfig`].
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    dataset: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    templates: Option<PathBuf>,
    cassette: Option<PathBuf>,
    mock_script: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    base_url: Option<String>,
    #[serde(default)]
    run: toml::Table,
}

/// Marks failures that should exit with the backend code.
#[derive(Debug)]
struct BackendSetup(String);

impl std::fmt::Display for BackendSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BackendSetup {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<BackendSetup>().is_some() {
        return 3;
    }
    match err.downcast_ref::<gda_core::Error>() {
        Some(e) if e.is_shortfall() => 2,
        Some(e) if e.is_backend() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit 1 so that 2 stays reserved for shortfalls.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Ingest { path, stats } => cmd_ingest(&path, stats),
        Command::Augment(args) => cmd_augment(*args),
        Command::Diversity(args) => cmd_diversity(args),
        Command::Results { files, method, json } => cmd_results(&files, &method, json),
        Command::ExportLexiconTemplate { out } => cmd_export_lexicon(out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_ingest(path: &Path, stats: bool) -> Result<()> {
    let dataset = Dataset::load(path)?;
    let s = dataset.stats();
    if stats {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("dataset   {}", s.name);
        println!("train     {}", s.train);
        println!("dev       {}", s.dev);
        println!("test      {}", s.test);
        println!("entities  {}", s.entities);
        println!("inventory {}", s.inventory.join(", "));
    }
    Ok(())
}

/// Overlays `over` onto `base`, descending into nested tables.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_config(args: &AugmentArgs) -> Result<(CliConfig, RunConfig)> {
    let mut file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: CliConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            // Relative paths in the file are taken relative to the file.
            let base = path.parent().unwrap_or(Path::new(""));
            let rebase = |p: &mut Option<PathBuf>| {
                if let Some(p) = p {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            };
            let mut cfg = cfg;
            rebase(&mut cfg.dataset);
            rebase(&mut cfg.lexicon);
            rebase(&mut cfg.templates);
            rebase(&mut cfg.cassette);
            rebase(&mut cfg.mock_script);
            rebase(&mut cfg.output_dir);
            cfg
        }
        None => CliConfig::default(),
    };

    let mut table = toml::Table::try_from(RunConfig::default())?;
    merge_tables(&mut table, std::mem::take(&mut file.run));
    let mut run: RunConfig = table.try_into().context("invalid [run] section")?;

    if let Some(m) = args.method {
        run.method = m.into();
    }
    if let Some(b) = args.backend {
        run.backend = b.into();
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                run.$field = v;
            }
        )*};
    }
    set!(seed_count, target_augmented, per_seed_candidates, variants_per_seed, max_retries, model_id, temperature, rng_seed);
    if args.max_tokens.is_some() {
        run.max_tokens = args.max_tokens;
    }
    macro_rules! set_path {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                file.$field = Some(v);
            }
        )*};
    }
    set_path!(dataset, lexicon, templates, cassette, mock_script, output_dir, base_url);
    run.validate()?;
    Ok((file, run))
}

fn build_backend(
    file: &CliConfig,
    run: &RunConfig,
    inventory: &[String],
    max_in_flight: usize,
) -> Result<(Box<dyn CompletionBackend>, Option<String>)> {
    let base_url = file.base_url.as_deref().unwrap_or(llm::DEFAULT_BASE_URL);
    let live = || -> Result<LiveBackend> {
        let backend = LiveBackend::from_env(base_url, max_in_flight);
        if std::env::var(llm::API_KEY_ENV).or_else(|_| std::env::var(llm::FALLBACK_API_KEY_ENV)).map_or(true, |k| k.is_empty()) {
            return Err(BackendSetup(format!(
                "live requests need an API key in {} or {}",
                llm::API_KEY_ENV,
                llm::FALLBACK_API_KEY_ENV
            ))
            .into());
        }
        Ok(backend)
    };
    let cassette = || -> Result<&PathBuf> {
        file.cassette
            .as_ref()
            .ok_or_else(|| BackendSetup("this backend mode needs --cassette".into()).into())
    };
    Ok(match run.backend {
        BackendMode::Live => (Box::new(live()?), None),
        BackendMode::Record => (Box::new(llm::record_session(cassette()?, live()?)?), None),
        BackendMode::Replay => {
            let path = cassette()?;
            let replay = llm::open_replay(path)
                .map_err(|e| BackendSetup(format!("cannot open cassette {}: {e}", path.display())))?;
            let digest = replay.cassette().digest().to_string();
            (Box::new(replay), Some(digest))
        }
        BackendMode::Mock => match &file.mock_script {
            Some(path) => {
                let mock = MockBackend::load_script(path)
                    .map_err(|e| BackendSetup(format!("cannot load mock script {}: {e}", path.display())))?;
                (Box::new(mock), None)
            }
            None => (Box::new(synth::synthetic_backend(inventory.to_vec())), None),
        },
    })
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let started = Instant::now();
    let (file, run) = resolve_config(&args)?;
    let dataset_path = file.dataset.clone().context("no dataset given (--dataset or `dataset` in the config)")?;
    let out_dir = file.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let dataset = Dataset::load(&dataset_path)?;
    let templates = match &file.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::default(),
    };
    let lexicon = match &file.lexicon {
        Some(p) => SynonymLexicon::load(p)?,
        None => SynonymLexicon::demo(),
    };

    let mut pipeline = Pipeline::new(&dataset, &templates).with_lexicon(&lexicon).with_jobs(args.jobs);
    let backend_holder;
    if run.method.uses_llm() {
        let (backend, digest) = build_backend(&file, &run, &dataset.entity_type_inventory, args.max_in_flight)?;
        backend_holder = backend;
        pipeline = pipeline.with_backend(backend_holder.as_ref());
        if let Some(d) = digest {
            pipeline = pipeline.with_cassette_digest(d);
        }
    }
    let output = pipeline.run(&run)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let rows = export_training_set(
        &output.seeds,
        &output.augmented,
        &dataset.entity_type_inventory,
        out_dir.join(EXPORT_FILE),
    )?;
    fs::write(out_dir.join(MANIFEST_FILE), output.manifest.to_json()?)?;
    let mut pairs = Vec::new();
    write_pairs_csv(&output.manifest.scoring_pairs(), &mut pairs)?;
    fs::write(out_dir.join(PAIRS_FILE), pairs)?;

    let t = &output.manifest.totals;
    eprintln!(
        "{}: {rows} sentences exported ({} seeds + {} augmented), {} LLM calls, {} seeds skipped, {:.2}s",
        run.method.as_str(),
        output.seeds.len(),
        output.augmented.len(),
        t.llm_calls,
        t.seeds_skipped,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_diversity(args: DiversityArgs) -> Result<()> {
    let mut pairs: Vec<ScoringPair> = Vec::new();
    let mut expected: Vec<String> = Vec::new();
    let mut warnings = Vec::new();
    for path in &args.manifests {
        let m = RunManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
        let method = m.config.method.as_str().to_string();
        if !expected.contains(&method) {
            expected.push(method);
        }
        let linked = m.scoring_pairs();
        let unlinked = m.selected.len() - linked.len();
        if unlinked > 0 {
            warnings.push(format!("{}: {unlinked} sentences without a seed link omitted", path.display()));
        }
        pairs.extend(linked);
    }
    for path in &args.pairs {
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        pairs.extend(read_pairs_csv(f).with_context(|| format!("reading {}", path.display()))?);
    }
    if pairs.is_empty() {
        bail!("no pairs to score");
    }
    let smoothing = match args.smoothing {
        SmoothingArg::None => Smoothing::None,
        SmoothingArg::Epsilon => Smoothing::AddEpsilon(args.epsilon),
        SmoothingArg::Floor => Smoothing::FloorCounts,
    };
    let cfg = BleuConfig::uniform(diversity::MAX_ORDER, smoothing);
    let mut report = diversity::diversity_report(&pairs, &expected, &cfg)?;
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    for w in &report.warnings {
        log::warn!("{w}");
    }

    fs::create_dir_all(&args.out_dir)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(args.out_dir.join("bleu_pairs.csv"), csv)?;
    fs::write(args.out_dir.join("diversity.json"), report.to_json()?)?;
    let mut pairs_csv = Vec::new();
    write_pairs_csv(&pairs, &mut pairs_csv)?;
    fs::write(args.out_dir.join(PAIRS_FILE), pairs_csv)?;

    let mut stdout = std::io::stdout().lock();
    for m in &report.methods {
        writeln!(stdout, "{:<8} pairs={:<5} mean={:.4} median={:.4}", m.method, m.pairs, m.mean, m.median)?;
    }
    for d in &report.deltas {
        writeln!(stdout, "{} vs {}: {:+.1}%", d.method, d.baseline, d.relative * 100.0)?;
    }
    Ok(())
}

fn cmd_results(files: &[PathBuf], method: &str, json: bool) -> Result<()> {
    let mut all = Vec::new();
    for path in files {
        all.extend(results::load_results(path).with_context(|| format!("reading {}", path.display()))?);
    }
    let mut baselines: Vec<&str> = Vec::new();
    for r in &all {
        if r.method != method && !baselines.contains(&r.method.as_str()) {
            baselines.push(&r.method);
        }
    }
    let comparisons: Vec<results::Comparison> =
        baselines.iter().flat_map(|b| results::compare(&all, method, b)).collect();

    let mut stdout = std::io::stdout().lock();
    if json {
        let v = serde_json::json!({"results": all, "comparisons": comparisons});
        writeln!(stdout, "{}", serde_json::to_string_pretty(&v)?)?;
        return Ok(());
    }
    writeln!(stdout, "{:<12} {:<8} {:>7} {:>7} {:>7} {:>9}", "dataset", "method", "P", "R", "F1", "bertscore")?;
    for r in &all {
        let b = r.bertscore.map_or_else(|| "-".to_string(), |b| format!("{b:.4}"));
        writeln!(
            stdout,
            "{:<12} {:<8} {:>7.4} {:>7.4} {:>7.4} {:>9}",
            r.dataset, r.method, r.precision, r.recall, r.f1, b
        )?;
    }
    for c in &comparisons {
        let order = match c.f1_order() {
            std::cmp::Ordering::Greater => "above",
            std::cmp::Ordering::Less => "below",
            std::cmp::Ordering::Equal => "level with",
        };
        writeln!(stdout, "{}: {} F1 {} {} ({:+.4})", c.dataset, c.method, order, c.baseline, c.f1_delta)?;
    }
    Ok(())
}

fn cmd_export_lexicon(out: Option<&Path>) -> Result<()> {
    let text = SynonymLexicon::demo_tsv();
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
