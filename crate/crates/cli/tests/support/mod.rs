#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gda_core::corpus::{serialize_conll, Dataset};
use gda_core::llm::record_session;
use gda_core::pipeline::{Pipeline, RunConfig};
use gda_core::prompt::TemplateSet;
use gda_core::synth::{synthetic_backend, synthetic_dataset, DEFAULT_TYPES};

pub fn gda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gda"))
        .args(args)
        .env_remove("GDA_API_KEY")
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a synthetic corpus as `<root>/<name>/{train,dev,test}.conll`.
pub fn write_corpus(root: &Path, name: &str, sizes: [usize; 3], rng_seed: u64) -> PathBuf {
    let ds = synthetic_dataset(name, sizes, &DEFAULT_TYPES, rng_seed);
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("train.conll"), serialize_conll(&ds.train)).unwrap();
    fs::write(dir.join("dev.conll"), serialize_conll(&ds.dev)).unwrap();
    fs::write(dir.join("test.conll"), serialize_conll(&ds.test)).unwrap();
    dir
}

/// Runs `cfg` against the synthetic responder, recording every exchange.
pub fn record_cassette(dataset_dir: &Path, cassette: &Path, cfg: &RunConfig) {
    let ds = Dataset::load(dataset_dir).unwrap();
    let templates = TemplateSet::default();
    let recorder = record_session(cassette, synthetic_backend(ds.entity_type_inventory.clone())).unwrap();
    Pipeline::new(&ds, &templates).with_backend(&recorder).run(cfg).unwrap();
}

pub fn count_sentences(conll: &str) -> usize {
    gda_core::corpus::parse_conll(conll).unwrap().len()
}
