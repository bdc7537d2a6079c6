//! Regenerates `fixtures/interlingua/cassette.jsonl` from the scripted replies
//! below. Run after changing a prompt template:
//!
//! ```text
//! cargo run -p gda-core --example record_interlingua_cassette
//! ```

use std::path::Path;

use gda_core::corpus::Dataset;
use gda_core::llm::{record_session, MockBackend};
use gda_core::pipeline::{Method, Pipeline, RunConfig};
use gda_core::prompt::TemplateSet;

const SEED: &str = "interlingua:train:0";

const VARIANTS: &str = r#"```json
[
  {"sentence": "The contrastive approach to AI has been repeatedly advocated by researchers originally interested in computer vision who take natural language processing to be one possible application.",
   "entities": [{"text": "contrastive approach", "type": "Method"}, {"text": "AI", "type": "Task"}, {"text": "computer vision", "type": "Task"}, {"text": "natural language processing", "type": "Task"}]},
  {"sentence": "The symbolic approach to ML has been repeatedly advocated by researchers originally interested in pattern recognition who take deep learning to be one possible application.",
   "entities": [{"text": "symbolic approach", "type": "Method"}, {"text": "ML", "type": "Task"}, {"text": "pattern recognition", "type": "Task"}, {"text": "deep learning", "type": "Task"}]},
  {"sentence": "The neural approach to NLP has been repeatedly advocated by researchers originally interested in information retrieval who take sentiment analysis to be one possible application.",
   "entities": [{"text": "neural approach", "type": "Method"}, {"text": "NLP", "type": "Task"}, {"text": "information retrieval", "type": "Task"}, {"text": "sentiment analysis", "type": "Task"}]}
]
```"#;

const ABSTRACTION: &str = r#"```json
{"context": "Researchers from one field of language technology advocate a particular approach to a task and regard another task as one of its applications.",
 "structure": "Passive main clause with an agent phrase, followed by a relative clause stating what the agents take to be an application.",
 "roles": {"Method": "the approach being advocated", "Task": "the problem area the approach addresses, or the field the researchers come from"}}
```"#;

const GUIDED: &str = r#"```json
[
  {"sentence": "The symbolic, contrastive, neural, statistical, and rule-based approaches to AI, ML, NLP, CV, and NLU have been repeatedly advocated by researchers originally interested in various tasks and applications.",
   "entities": [{"text": "symbolic, contrastive, neural, statistical, and rule-based approaches", "type": "Method"}, {"text": "AI, ML, NLP, CV, and NLU", "type": "Task"}]},
  {"sentence": "The interlingual approach to MT has been repeatedly advocated by researchers originally interested in natural language understanding which is a possible application.",
   "entities": [{"text": "interlingual approach", "type": "Method"}, {"text": "MT", "type": "Task"}, {"text": "natural language understanding", "type": "Task"}]},
  {"sentence": "Researchers who were originally focused on natural language understanding have repeatedly advocated the interlingual approach to MT which is one of the potential applications.",
   "entities": [{"text": "natural language understanding", "type": "Task"}, {"text": "interlingual approach", "type": "Method"}, {"text": "MT", "type": "Task"}]}
]
```"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/interlingua");
    let dataset = Dataset::load(&dir)?;
    let templates = TemplateSet::default();
    let cassette = dir.join("cassette.jsonl");
    if cassette.exists() {
        std::fs::remove_file(&cassette)?;
    }

    let script = [
        (format!("gda/seed_generation/{SEED}/0"), vec![VARIANTS]),
        (format!("gda/abstraction/{SEED}/0"), vec![ABSTRACTION]),
        (format!("gda/guidance/{SEED}/0"), vec![GUIDED]),
        // The entity-swapped variants double as the naive method's output.
        (format!("naive/naive/{SEED}/0"), vec![VARIANTS]),
    ];
    let recorder = record_session(&cassette, MockBackend::from_script(script))?;
    for method in [Method::Gda, Method::Naive] {
        let config = RunConfig {
            method,
            seed_count: 1,
            target_augmented: 3,
            ..RunConfig::default()
        };
        let out = Pipeline::new(&dataset, &templates).with_backend(&recorder).run(&config)?;
        println!("{}: {} sentences", method.as_str(), out.augmented.len());
    }
    println!("wrote {}", cassette.display());
    Ok(())
}
