//! Prompt construction for the four generation stages and validation of
//! model replies.
//!
//! Templates are plain text files with a `[system]` and a `[user]` section
//! and `{{name}}` placeholders. Replies are expected as a fenced JSON block;
//! prose around the fence is ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{tokenize, EntitySpan, Origin, Provenance, Sentence};
use crate::error::{Error, Result};
use crate::llm::Message;
use crate::rng::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    SeedGeneration,
    Abstraction,
    Guidance,
    Naive,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::SeedGeneration,
        TemplateKind::Abstraction,
        TemplateKind::Guidance,
        TemplateKind::Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::SeedGeneration => "seed_generation",
            TemplateKind::Abstraction => "abstraction",
            TemplateKind::Guidance => "guidance",
            TemplateKind::Naive => "naive",
        }
    }

    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::SeedGeneration => &["sentence", "entities", "count", "format"],
            TemplateKind::Abstraction => &["sentences", "inventory", "format"],
            TemplateKind::Guidance => &["conditions", "inventory", "count", "format"],
            TemplateKind::Naive => &["entities", "count", "format"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateKind::SeedGeneration => include_str!("../templates/seed_generation.tmpl"),
            TemplateKind::Abstraction => include_str!("../templates/abstraction.tmpl"),
            TemplateKind::Guidance => include_str!("../templates/guidance.tmpl"),
            TemplateKind::Naive => include_str!("../templates/naive.tmpl"),
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub system_text: String,
    pub user_text: String,
    /// SHA-256 of the source text.
    pub hash: String,
}

fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                out.push(after[..close].trim());
                rest = &after[close + 2..];
            }
            None => break,
        }
    }
    out
}

impl PromptTemplate {
    pub fn parse(kind: TemplateKind, source: &str) -> Result<Self> {
        let err = |message: String| Error::Template {
            template: kind.name().to_string(),
            message,
        };
        let sys_at = source
            .find("[system]")
            .ok_or_else(|| err("missing [system] section".into()))?;
        let user_at = source
            .find("[user]")
            .ok_or_else(|| err("missing [user] section".into()))?;
        if user_at < sys_at {
            return Err(err("[system] must come before [user]".into()));
        }
        let system_text = source[sys_at + "[system]".len()..user_at].trim().to_string();
        let user_text = source[user_at + "[user]".len()..].trim().to_string();
        let found: Vec<&str> = placeholders(&system_text)
            .into_iter()
            .chain(placeholders(&user_text))
            .collect();
        for required in kind.required_placeholders() {
            if !found.contains(required) {
                return Err(err(format!("required placeholder {{{{{required}}}}} is missing")));
            }
        }
        Ok(Self {
            kind,
            system_text,
            user_text,
            hash: sha256_hex(source),
        })
    }

    pub fn default_for(kind: TemplateKind) -> Self {
        Self::parse(kind, kind.default_text()).expect("bundled template is valid")
    }

    /// Substitutes every placeholder. Fails when a placeholder has no binding.
    pub fn render(&self, bindings: &[(&str, String)]) -> Result<Vec<Message>> {
        for required in self.kind.required_placeholders() {
            if !bindings.iter().any(|(k, _)| k == required) {
                return Err(Error::Template {
                    template: self.kind.name().into(),
                    message: format!("placeholder {{{{{required}}}}} is unbound"),
                });
            }
        }
        let fill = |text: &str| -> Result<String> {
            let mut out = String::with_capacity(text.len());
            let mut rest = text;
            while let Some(open) = rest.find("{{") {
                let after = &rest[open + 2..];
                let Some(close) = after.find("}}") else { break };
                let name = after[..close].trim();
                let value = bindings
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| Error::Template {
                        template: self.kind.name().into(),
                        message: format!("placeholder {{{{{name}}}}} is unbound"),
                    })?;
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &after[close + 2..];
            }
            out.push_str(rest);
            Ok(out)
        };
        Ok(vec![
            Message::system(fill(&self.system_text)?),
            Message::user(fill(&self.user_text)?),
        ])
    }
}

/// The four templates used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub seed_generation: PromptTemplate,
    pub abstraction: PromptTemplate,
    pub guidance: PromptTemplate,
    pub naive: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            seed_generation: PromptTemplate::default_for(TemplateKind::SeedGeneration),
            abstraction: PromptTemplate::default_for(TemplateKind::Abstraction),
            guidance: PromptTemplate::default_for(TemplateKind::Guidance),
            naive: PromptTemplate::default_for(TemplateKind::Naive),
        }
    }
}

impl TemplateSet {
    /// Loads `<kind>.tmpl` files from `dir`, falling back to the bundled
    /// default for any file that is absent.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |kind: TemplateKind| -> Result<PromptTemplate> {
            let path = dir.join(format!("{}.tmpl", kind.name()));
            if path.is_file() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                PromptTemplate::parse(kind, &text)
            } else {
                Ok(PromptTemplate::default_for(kind))
            }
        };
        Ok(Self {
            seed_generation: load(TemplateKind::SeedGeneration)?,
            abstraction: load(TemplateKind::Abstraction)?,
            guidance: load(TemplateKind::Guidance)?,
            naive: load(TemplateKind::Naive)?,
        })
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        match kind {
            TemplateKind::SeedGeneration => &self.seed_generation,
            TemplateKind::Abstraction => &self.abstraction,
            TemplateKind::Guidance => &self.guidance,
            TemplateKind::Naive => &self.naive,
        }
    }

    /// Hash over the four template hashes, recorded in run manifests.
    pub fn hash(&self) -> String {
        let joined: String = TemplateKind::ALL
            .iter()
            .map(|k| format!("{}:{}\n", k.name(), self.get(*k).hash))
            .collect();
        sha256_hex(joined)
    }
}

const GENERATION_FORMAT: &str = "Reply with a single fenced JSON block and nothing else:\n\
```json\n\
[{\"sentence\": \"<sentence>\", \"entities\": [{\"text\": \"<entity exactly as written in the sentence>\", \"type\": \"<entity type>\"}]}]\n\
```";

const ABSTRACTION_FORMAT: &str = "Reply with a single fenced JSON block and nothing else:\n\
```json\n\
{\"context\": \"<context>\", \"structure\": \"<sentence structure>\", \"roles\": {\"<entity type>\": \"<role>\"}}\n\
```";

fn entity_lines(seed: &Sentence) -> String {
    seed.entities
        .iter()
        .map(|e| format!("- \"{}\" ({})", seed.surface(e), e.entity_type))
        .collect::<Vec<_>>()
        .join("\n")
}

fn require_entities(seed: &Sentence) -> Result<()> {
    if seed.entities.is_empty() {
        return Err(Error::Prompt(format!(
            "seed {} has no entities to work from",
            seed.id
        )));
    }
    Ok(())
}

/// Asks for `count` copies of `seed` with each entity swapped for another
/// entity of the same type.
pub fn build_seed_generation_prompt(
    templates: &TemplateSet,
    seed: &Sentence,
    count: usize,
) -> Result<Vec<Message>> {
    require_entities(seed)?;
    if count == 0 {
        return Err(Error::Prompt("variant count must be at least 1".into()));
    }
    templates.seed_generation.render(&[
        ("sentence", seed.text()),
        ("entities", entity_lines(seed)),
        ("count", count.to_string()),
        ("format", GENERATION_FORMAT.to_string()),
    ])
}

/// Combines the seed, its entity-swapped variants and the dataset's type
/// inventory into a request for context, structure and entity roles.
pub fn build_abstraction_prompt(
    templates: &TemplateSet,
    seed: &Sentence,
    variants: &[Sentence],
    inventory: &[String],
) -> Result<Vec<Message>> {
    if variants.is_empty() {
        return Err(Error::Prompt("abstraction needs at least one variant".into()));
    }
    for s in std::iter::once(seed).chain(variants) {
        if let Some(e) = s
            .entities
            .iter()
            .find(|e| !inventory.contains(&e.entity_type))
        {
            return Err(Error::Prompt(format!(
                "sentence {} uses type `{}` outside the inventory",
                s.id, e.entity_type
            )));
        }
    }
    let mut lines = vec![format!("1. {}", seed.text())];
    lines.extend(
        variants
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{}. {}", i + 2, v.text())),
    );
    templates.abstraction.render(&[
        ("sentences", lines.join("\n")),
        ("inventory", inventory.join(", ")),
        ("format", ABSTRACTION_FORMAT.to_string()),
    ])
}

/// Generation prompt conditioned only on an abstraction record. Roles are
/// emitted in inventory order, one condition per described type.
pub fn build_guidance_prompt(
    templates: &TemplateSet,
    record: &AbstractionRecord,
    inventory: &[String],
    m: usize,
) -> Result<Vec<Message>> {
    if m == 0 {
        return Err(Error::Prompt("must request at least one sentence".into()));
    }
    record.validate(inventory)?;
    let mut conditions = vec![
        format!("- Context: {}", record.context_summary.trim()),
        format!("- Sentence structure: {}", record.structure_description.trim()),
    ];
    for ty in inventory {
        if let Some(role) = record.entity_roles.get(ty) {
            conditions.push(format!("- Role of {ty} entities: {}", role.trim()));
        }
    }
    templates.guidance.render(&[
        ("conditions", conditions.join("\n")),
        ("inventory", inventory.join(", ")),
        ("count", m.to_string()),
        ("format", GENERATION_FORMAT.to_string()),
    ])
}

/// Generation prompt carrying only the seed's entity surfaces and types.
pub fn build_naive_prompt(templates: &TemplateSet, seed: &Sentence, m: usize) -> Result<Vec<Message>> {
    require_entities(seed)?;
    if m == 0 {
        return Err(Error::Prompt("must request at least one sentence".into()));
    }
    templates.naive.render(&[
        ("entities", entity_lines(seed)),
        ("count", m.to_string()),
        ("format", GENERATION_FORMAT.to_string()),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionRecord {
    pub context_summary: String,
    pub structure_description: String,
    pub entity_roles: BTreeMap<String, String>,
    pub source_seed_ids: Vec<String>,
}

impl AbstractionRecord {
    pub fn validate(&self, inventory: &[String]) -> Result<()> {
        if self.context_summary.trim().is_empty() {
            return Err(Error::AbstractionField { field: "context" });
        }
        if self.structure_description.trim().is_empty() {
            return Err(Error::AbstractionField { field: "structure" });
        }
        if self.entity_roles.is_empty() {
            return Err(Error::AbstractionField { field: "roles" });
        }
        if let Some(ty) = self.entity_roles.keys().find(|t| !inventory.contains(t)) {
            return Err(Error::Prompt(format!("role for unknown type `{ty}`")));
        }
        Ok(())
    }
}

/// Body of the first fenced block, or the whole trimmed text when there is
/// no fence. An unterminated fence runs to the end of the text.
pub fn extract_fenced(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text.trim();
    };
    let after = &text[open + 3..];
    // Skip an info string such as `json`.
    let body_start = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(char::is_alphanumeric) => nl + 1,
        _ => 0,
    };
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Parses an abstraction reply. Roles for types outside `inventory` are
/// dropped and reported in the returned warnings.
pub fn parse_abstraction(text: &str, inventory: &[String]) -> Result<(AbstractionRecord, Vec<String>)> {
    let body = extract_fenced(text);
    let v: Value =
        serde_json::from_str(body).map_err(|e| Error::AbstractionFormat(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::AbstractionFormat("expected a JSON object".into()))?;
    let text_field = |field: &'static str| -> Result<String> {
        obj.get(field)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .ok_or(Error::AbstractionField { field })
    };
    let context_summary = text_field("context")?;
    let structure_description = text_field("structure")?;
    let roles = obj
        .get("roles")
        .and_then(Value::as_object)
        .ok_or(Error::AbstractionField { field: "roles" })?;

    let mut warnings = Vec::new();
    let mut entity_roles = BTreeMap::new();
    for (ty, role) in roles {
        let Some(role) = role.as_str().map(str::trim).filter(|r| !r.is_empty()) else {
            warnings.push(format!("role for `{ty}` is empty or not text, dropped"));
            continue;
        };
        if inventory.contains(ty) {
            entity_roles.insert(ty.clone(), role.to_string());
        } else {
            warnings.push(format!("role for unknown type `{ty}` dropped"));
        }
    }
    if entity_roles.is_empty() {
        return Err(Error::AbstractionField { field: "roles" });
    }
    Ok((
        AbstractionRecord {
            context_summary,
            structure_description,
            entity_roles,
            source_seed_ids: Vec::new(),
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimedEntity {
    pub text: String,
    #[serde(rename = "type")]
    pub entity_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "kebab-case")]
pub enum RejectReason {
    /// The reply or this item does not follow the JSON contract.
    Format,
    NoEntities,
    UnknownType(String),
    SurfaceMissing(String),
    Overlap(String),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::Format => "format",
            RejectReason::NoEntities => "no-entities",
            RejectReason::UnknownType(_) => "unknown-type",
            RejectReason::SurfaceMissing(_) => "surface-missing",
            RejectReason::Overlap(_) => "overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }

    /// `accepted` or the rejection code.
    pub fn code(&self) -> &'static str {
        match self {
            Verdict::Accepted => "accepted",
            Verdict::Rejected(r) => r.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub raw_text: String,
    /// Tokenized sentence; entity spans are only filled in when accepted.
    pub sentence: Sentence,
    pub claimed_entities: Vec<ClaimedEntity>,
    pub verdict: Verdict,
}

impl Candidate {
    fn rejected(raw_text: String, tokens: Vec<String>, claims: Vec<ClaimedEntity>, k: usize, reason: RejectReason) -> Self {
        Self {
            raw_text,
            sentence: Sentence::new(format!("candidate:{k}"), tokens, Vec::new(), placeholder_provenance()),
            claimed_entities: claims,
            verdict: Verdict::Rejected(reason),
        }
    }
}

fn placeholder_provenance() -> Provenance {
    Provenance::derived(Origin::Gda, None)
}

/// Leftmost token-aligned match of every claim. A repeated claim takes the
/// next occurrence not already claimed by an identical surface.
fn align(tokens: &[String], claims: &[ClaimedEntity], inventory: &[String]) -> std::result::Result<Vec<EntitySpan>, RejectReason> {
    if claims.is_empty() {
        return Err(RejectReason::NoEntities);
    }
    let mut spans: Vec<(EntitySpan, &str)> = Vec::with_capacity(claims.len());
    for claim in claims {
        if !inventory.contains(&claim.entity_type) {
            return Err(RejectReason::UnknownType(claim.entity_type.clone()));
        }
        let surface = tokenize(&claim.text);
        if surface.is_empty() || surface.len() > tokens.len() {
            return Err(RejectReason::SurfaceMissing(claim.text.clone()));
        }
        let occurrences: Vec<usize> = (0..=tokens.len() - surface.len())
            .filter(|&i| tokens[i..i + surface.len()] == surface[..])
            .collect();
        let Some(&first) = occurrences.first() else {
            return Err(RejectReason::SurfaceMissing(claim.text.clone()));
        };
        let start = occurrences
            .iter()
            .copied()
            .find(|&i| !spans.iter().any(|(s, _)| s.start == i && s.end == i + surface.len()))
            .unwrap_or(first);
        spans.push((
            EntitySpan::new(start, start + surface.len(), claim.entity_type.clone()),
            claim.text.as_str(),
        ));
    }
    // Sorting keeps claim order among equal starts, so the later claim is reported.
    spans.sort_by_key(|(s, _)| (s.start, s.end));
    for w in spans.windows(2) {
        if w[0].0.overlaps(&w[1].0) {
            return Err(RejectReason::Overlap(w[1].1.to_string()));
        }
    }
    Ok(spans.into_iter().map(|(s, _)| s).collect())
}

/// Parses a generation reply into candidates, one per reported sentence, in
/// reply order. A reply whose envelope cannot be parsed yields a single
/// candidate rejected for format.
pub fn parse_candidates(text: &str, inventory: &[String]) -> Vec<Candidate> {
    let body = extract_fenced(text);
    let items = match serde_json::from_str::<Value>(body) {
        Ok(Value::Array(items)) => items,
        _ => {
            return vec![Candidate::rejected(
                text.to_string(),
                Vec::new(),
                Vec::new(),
                0,
                RejectReason::Format,
            )]
        }
    };
    items
        .into_iter()
        .enumerate()
        .map(|(k, item)| {
            let raw = item.to_string();
            let sentence_text = item.get("sentence").and_then(Value::as_str);
            let claims = item
                .get("entities")
                .and_then(|e| serde_json::from_value::<Vec<ClaimedEntity>>(e.clone()).ok());
            let (Some(sentence_text), Some(claims)) = (sentence_text, claims) else {
                return Candidate::rejected(raw, Vec::new(), Vec::new(), k, RejectReason::Format);
            };
            let tokens = tokenize(sentence_text);
            if tokens.is_empty() {
                return Candidate::rejected(raw, tokens, claims, k, RejectReason::Format);
            }
            match align(&tokens, &claims, inventory) {
                Ok(spans) => Candidate {
                    raw_text: raw,
                    sentence: Sentence::new(format!("candidate:{k}"), tokens, spans, placeholder_provenance()),
                    claimed_entities: claims,
                    verdict: Verdict::Accepted,
                },
                Err(reason) => Candidate::rejected(raw, tokens, claims, k, reason),
            }
        })
        .collect()
}
