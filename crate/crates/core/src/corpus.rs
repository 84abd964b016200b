//! Synthetic knowledge corpora and the JSONL bundle format.
//!
//! Each entity becomes one document that states its title once and then
//! weaves its facts together, mostly through coreference ("Editing was
//! handled by ..."), plus a handful of short question/answer pairs that
//! always name the entity.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tokenizer::pieces;

const DEFAULT_SCHEMA: &str = include_str!("../data/default_schema.json");
pub const BUNDLE_MANIFEST: &str = "bundle.json";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("value space of attribute {attribute} is too small to keep test answers out of training data")]
    VocabularyExhausted { attribute: String },
    #[error("entity {entity} has no attribute {attribute}")]
    UnknownAttribute { entity: String, attribute: String },
    #[error("document {doc} has {tokens} tokens, above the limit of {limit}")]
    DocumentTooLong { doc: String, tokens: usize, limit: usize },
    #[error("bundle validation failed:\n{}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<ImportIssue>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportIssue {
    pub file: String,
    pub line: Option<usize>,
    pub id: Option<String>,
    pub message: String,
}

impl std::fmt::Display for ImportIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        if let Some(id) = &self.id {
            write!(f, " [{id}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

// ---------------------------------------------------------------- schema ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    /// Value template over pool placeholders, e.g. `"{first} {last}"`.
    pub value: String,
    /// Fact sentences that do not restate the title.
    pub coref: Vec<String>,
    /// Fact sentences that name the entity.
    #[serde(default)]
    pub titled: Vec<String>,
    pub question: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    pub title: String,
    pub intro: Vec<String>,
    pub attributes: Vec<AttributeSchema>,
}

impl DomainSchema {
    pub fn attribute(&self, name: &str) -> Option<&AttributeSchema> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub pools: BTreeMap<String, Vec<String>>,
    pub domains: Vec<DomainSchema>,
}

impl Schema {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_SCHEMA).expect("built-in schema parses")
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let schema: Schema = serde_json::from_str(s).map_err(|e| CorpusError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSchema> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.domains.is_empty() {
            return Err(CorpusError::Schema("no domains".into()));
        }
        for d in &self.domains {
            if d.attributes.is_empty() || d.intro.is_empty() {
                return Err(CorpusError::Schema(format!("domain {} needs attributes and intro templates", d.name)));
            }
            ValueTemplate::parse(&d.title, &self.pools)?;
            for a in &d.attributes {
                ValueTemplate::parse(&a.value, &self.pools)?;
                if a.coref.is_empty() {
                    return Err(CorpusError::Schema(format!("{}.{} has no coreferent template", d.name, a.name)));
                }
                if !a.question.contains("{title}") {
                    return Err(CorpusError::Schema(format!(
                        "question for {}.{} must mention {{title}}",
                        d.name, a.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A value template split into literal text and pool references.
#[derive(Debug, Clone)]
struct ValueTemplate {
    parts: Vec<TemplatePart>,
}

#[derive(Debug, Clone)]
enum TemplatePart {
    Literal(String),
    Pool(Vec<String>),
}

impl ValueTemplate {
    fn parse(src: &str, pools: &BTreeMap<String, Vec<String>>) -> Result<Self, CorpusError> {
        let mut parts = Vec::new();
        let mut rest = src;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(TemplatePart::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| CorpusError::Schema(format!("unclosed placeholder in {src:?}")))?;
            let name = &rest[open + 1..open + close];
            let pool = pools
                .get(name)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| CorpusError::Schema(format!("unknown or empty pool {name:?}")))?;
            parts.push(TemplatePart::Pool(pool.clone()));
            rest = &rest[open + close + 1..];
        }
        if !rest.is_empty() {
            parts.push(TemplatePart::Literal(rest.to_string()));
        }
        Ok(Self { parts })
    }

    fn size(&self) -> u64 {
        self.parts
            .iter()
            .map(|p| match p {
                TemplatePart::Literal(_) => 1,
                TemplatePart::Pool(v) => v.len() as u64,
            })
            .product()
    }

    /// Mixed-radix decoding of a combination index.
    fn render(&self, mut index: u64) -> String {
        let mut out = String::new();
        for p in self.parts.iter().rev() {
            match p {
                TemplatePart::Literal(s) => out.insert_str(0, s),
                TemplatePart::Pool(v) => {
                    let n = v.len() as u64;
                    out.insert_str(0, &v[(index % n) as usize]);
                    index /= n;
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------- records ---

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub domain: String,
    pub title: String,
    /// Attribute name -> value phrase, in schema order.
    pub attributes: Vec<(String, String)>,
}

impl Entity {
    pub fn value(&self, attribute: &str) -> Option<&str> {
        self.attributes.iter().find(|(n, _)| n == attribute).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub entity_id: String,
    pub domain: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub doc_id: String,
    pub domain: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    OldworldDocs,
    OldworldQa,
    TrainDocs,
    TrainQa,
    TestDocs,
    TestQa,
    RetentionQa,
}

impl Split {
    pub const ALL: [Split; 7] = [
        Split::OldworldDocs,
        Split::OldworldQa,
        Split::TrainDocs,
        Split::TrainQa,
        Split::TestDocs,
        Split::TestQa,
        Split::RetentionQa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::OldworldDocs => "oldworld_docs",
            Split::OldworldQa => "oldworld_qa",
            Split::TrainDocs => "train_docs",
            Split::TrainQa => "train_qa",
            Split::TestDocs => "test_docs",
            Split::TestQa => "test_qa",
            Split::RetentionQa => "retention_qa",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn is_docs(self) -> bool {
        matches!(self, Split::OldworldDocs | Split::TrainDocs | Split::TestDocs)
    }

    /// Document split that QA pairs of this split must point into.
    fn doc_split(self) -> Split {
        match self {
            Split::OldworldQa | Split::RetentionQa | Split::OldworldDocs => Split::OldworldDocs,
            Split::TrainQa | Split::TrainDocs => Split::TrainDocs,
            Split::TestQa | Split::TestDocs => Split::TestDocs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusBundle {
    pub oldworld_docs: Vec<Document>,
    pub oldworld_qa: Vec<QaPair>,
    pub train_docs: Vec<Document>,
    pub train_qa: Vec<QaPair>,
    pub test_docs: Vec<Document>,
    pub test_qa: Vec<QaPair>,
    pub retention_qa: Vec<QaPair>,
}

impl CorpusBundle {
    pub fn docs(&self, split: Split) -> &[Document] {
        match split {
            Split::OldworldDocs => &self.oldworld_docs,
            Split::TrainDocs => &self.train_docs,
            Split::TestDocs => &self.test_docs,
            _ => &[],
        }
    }

    pub fn qas(&self, split: Split) -> &[QaPair] {
        match split {
            Split::OldworldQa => &self.oldworld_qa,
            Split::TrainQa => &self.train_qa,
            Split::TestQa => &self.test_qa,
            Split::RetentionQa => &self.retention_qa,
            _ => &[],
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        if split.is_docs() {
            self.docs(split).len()
        } else {
            self.qas(split).len()
        }
    }

    /// Domain tags present in a split.
    pub fn domains(&self, split: Split) -> BTreeSet<String> {
        if split.is_docs() {
            self.docs(split).iter().map(|d| d.domain.clone()).collect()
        } else {
            self.qas(split).iter().map(|q| q.domain.clone()).collect()
        }
    }

    /// Domain of the evaluation documents (the most common one when mixed).
    pub fn test_domain(&self) -> Option<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &self.test_docs {
            *counts.entry(&d.domain).or_default() += 1;
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0))).map(|(d, _)| d.to_string())
    }

    pub fn is_empty(&self) -> bool {
        Split::ALL.iter().all(|&s| self.split_len(s) == 0)
    }

    pub fn all_docs(&self) -> impl Iterator<Item = &Document> {
        self.oldworld_docs.iter().chain(&self.train_docs).chain(&self.test_docs)
    }

    pub fn doc(&self, id: &str) -> Option<&Document> {
        self.all_docs().find(|d| d.id == id)
    }

    pub fn doc_index(&self) -> HashMap<&str, &Document> {
        self.all_docs().map(|d| (d.id.as_str(), d)).collect()
    }

    /// Every text the tokenizer must cover, including the QA prompt format.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.all_docs().flat_map(|d| [d.title.as_str(), d.text.as_str()]).chain(
            Split::ALL
                .iter()
                .flat_map(move |&s| self.qas(s).iter().flat_map(|q| [q.question.as_str(), q.answer.as_str()])),
        )
    }

    fn jsonl(&self, split: Split) -> String {
        let mut out = String::new();
        if split.is_docs() {
            for d in self.docs(split) {
                out.push_str(&serde_json::to_string(d).expect("serializes"));
                out.push('\n');
            }
        } else {
            for q in self.qas(split) {
                out.push_str(&serde_json::to_string(q).expect("serializes"));
                out.push('\n');
            }
        }
        out
    }

    /// SHA-256 over the canonical JSONL of every split.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in Split::ALL {
            h.update(s.name().as_bytes());
            h.update(self.jsonl(s).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes one JSONL file per split plus a `bundle.json` manifest.
    pub fn export(&self, dir: &Path) -> Result<PathBuf, CorpusError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CorpusError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut manifest = BTreeMap::new();
        for s in Split::ALL {
            let file = format!("{}.jsonl", s.name());
            let path = dir.join(&file);
            fs::write(&path, self.jsonl(s)).map_err(io(&path))?;
            manifest.insert(s.name().to_string(), file);
        }
        let path = dir.join(BUNDLE_MANIFEST);
        let mut f = fs::File::create(&path).map_err(io(&path))?;
        f.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes()).map_err(io(&path))?;
        Ok(path)
    }

    /// Checks every cross-record invariant; used after import and generation.
    pub fn validate(&self) -> Vec<ImportIssue> {
        let mut issues = Vec::new();
        let issue = |split: Split, id: &str, message: String| ImportIssue {
            file: format!("{}.jsonl", split.name()),
            line: None,
            id: Some(id.to_string()),
            message,
        };
        let mut doc_split: HashMap<&str, Split> = HashMap::new();
        for s in [Split::OldworldDocs, Split::TrainDocs, Split::TestDocs] {
            for d in self.docs(s) {
                if doc_split.insert(&d.id, s).is_some() {
                    issues.push(issue(s, &d.id, "duplicate document id".into()));
                }
            }
        }
        for s in [Split::OldworldQa, Split::TrainQa, Split::TestQa, Split::RetentionQa] {
            let mut seen = HashSet::new();
            for q in self.qas(s) {
                if !seen.insert(q.id.as_str()) {
                    issues.push(issue(s, &q.id, "duplicate QA id".into()));
                }
                match doc_split.get(q.doc_id.as_str()) {
                    None => issues.push(issue(s, &q.id, format!("doc_id {} does not resolve", q.doc_id))),
                    Some(&ds) if ds != s.doc_split() => issues.push(issue(
                        s,
                        &q.id,
                        format!("doc_id {} belongs to {}, expected {}", q.doc_id, ds.name(), s.doc_split().name()),
                    )),
                    _ => {}
                }
            }
        }
        let seen_entities: HashSet<&str> =
            self.oldworld_docs.iter().chain(&self.train_docs).map(|d| d.entity_id.as_str()).collect();
        for d in &self.test_docs {
            if seen_entities.contains(d.entity_id.as_str()) {
                issues.push(issue(
                    Split::TestDocs,
                    &d.id,
                    format!("test entity {} also appears in training splits", d.entity_id),
                ));
            }
        }
        issues
    }
}

/// Reads a bundle from a manifest mapping split names to JSONL paths
/// (relative paths resolve against the manifest's directory). Missing splits
/// are empty.
pub fn import_bundle(manifest: &Path) -> Result<CorpusBundle, CorpusError> {
    let text =
        fs::read_to_string(manifest).map_err(|source| CorpusError::Io { path: manifest.to_path_buf(), source })?;
    let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| {
        CorpusError::Validation(vec![ImportIssue {
            file: manifest.display().to_string(),
            line: None,
            id: None,
            message: format!("manifest must map split names to paths: {e}"),
        }])
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut paths = BTreeMap::new();
    for (name, p) in &map {
        let split = Split::from_name(name).ok_or_else(|| {
            CorpusError::Validation(vec![ImportIssue {
                file: manifest.display().to_string(),
                line: None,
                id: None,
                message: format!("unknown split {name:?}"),
            }])
        })?;
        paths.insert(split, base.join(p));
    }
    import_paths(&paths)
}

pub fn import_paths(paths: &BTreeMap<Split, PathBuf>) -> Result<CorpusBundle, CorpusError> {
    let mut bundle = CorpusBundle::default();
    let mut issues = Vec::new();
    for (&split, path) in paths {
        let file = fs::File::open(path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        let fname = path.display().to_string();
        let mut ids = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CorpusError::Io { path: path.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String, id: Option<String>| ImportIssue {
                file: fname.clone(),
                line: Some(i + 1),
                id,
                message,
            };
            if split.is_docs() {
                match serde_json::from_str::<Document>(&line) {
                    Ok(d) => {
                        if !ids.insert(d.id.clone()) {
                            issues.push(bad("duplicate id".into(), Some(d.id.clone())));
                        }
                        match split {
                            Split::OldworldDocs => bundle.oldworld_docs.push(d),
                            Split::TrainDocs => bundle.train_docs.push(d),
                            _ => bundle.test_docs.push(d),
                        }
                    }
                    Err(e) => issues.push(bad(format!("malformed document record: {e}"), None)),
                }
            } else {
                match serde_json::from_str::<QaPair>(&line) {
                    Ok(q) => {
                        if !ids.insert(q.id.clone()) {
                            issues.push(bad("duplicate id".into(), Some(q.id.clone())));
                        }
                        match split {
                            Split::OldworldQa => bundle.oldworld_qa.push(q),
                            Split::TrainQa => bundle.train_qa.push(q),
                            Split::TestQa => bundle.test_qa.push(q),
                            _ => bundle.retention_qa.push(q),
                        }
                    }
                    Err(e) => issues.push(bad(format!("malformed QA record: {e}"), None)),
                }
            }
        }
    }
    if issues.is_empty() {
        issues = bundle.validate();
        issues.retain(|i| !i.message.starts_with("duplicate"));
    }
    if issues.is_empty() {
        Ok(bundle)
    } else {
        Err(CorpusError::Validation(issues))
    }
}

// -------------------------------------------------------------- generator ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    /// Old-world (base pretraining) entities per domain.
    pub oldworld: BTreeMap<String, usize>,
    /// Training entities per domain.
    pub train: BTreeMap<String, usize>,
    pub test: usize,
    pub test_domain: String,
    /// Retention QA pairs sampled from old-world QA.
    pub retention: usize,
    pub qa_per_entity: usize,
    /// Overrides `qa_per_entity` for old-world entities.
    #[serde(default)]
    pub oldworld_qa_per_entity: Option<usize>,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Share of each attribute's value space reserved for test entities.
    pub test_value_fraction: f64,
    /// Longest allowed document, counting the leading `<bos>`.
    pub max_doc_tokens: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self {
            oldworld: [("film", 1000), ("politics", 500), ("music", 500)]
                .into_iter()
                .map(|(d, n)| (d.to_string(), n))
                .collect(),
            train: [("film", 500), ("politics", 250), ("music", 250)]
                .into_iter()
                .map(|(d, n)| (d.to_string(), n))
                .collect(),
            test: 128,
            test_domain: "film".to_string(),
            retention: 256,
            qa_per_entity: 5,
            oldworld_qa_per_entity: None,
            min_attributes: 6,
            max_attributes: 12,
            test_value_fraction: 0.25,
            max_doc_tokens: 256,
        }
    }
}

/// Generated bundle together with the entities it was rendered from.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub bundle: CorpusBundle,
    pub entities: Vec<(Split, Entity)>,
}

struct ValueSpace {
    template: ValueTemplate,
    reserved: Vec<u64>,
    open: Vec<u64>,
}

fn words(s: &str) -> Vec<String> {
    pieces(s)
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn overlaps(a: &str, b: &str) -> bool {
    let (wa, wb) = (words(a), words(b));
    contains_seq(&wa, &wb) || contains_seq(&wb, &wa)
}

pub fn generate_corpus(schema: &Schema, counts: &CorpusCounts, seed: u64) -> Result<GeneratedCorpus, CorpusError> {
    schema.validate()?;
    let c = counts;
    if c.qa_per_entity == 0 {
        return Err(CorpusError::InvalidCounts("qa_per_entity must be at least 1".into()));
    }
    if c.test == 0 || c.train.values().sum::<usize>() == 0 || c.oldworld.values().sum::<usize>() == 0 {
        return Err(CorpusError::InvalidCounts(
            "old-world, train and test splits each need at least one entity".into(),
        ));
    }
    if c.min_attributes == 0 || c.min_attributes > c.max_attributes {
        return Err(CorpusError::InvalidCounts(format!(
            "attribute range {}..={} is empty",
            c.min_attributes, c.max_attributes
        )));
    }
    if !(c.test_value_fraction > 0.0 && c.test_value_fraction < 1.0) {
        return Err(CorpusError::InvalidCounts("test_value_fraction must lie in (0, 1)".into()));
    }
    let ow_qa = c.oldworld_qa_per_entity.unwrap_or(c.qa_per_entity);
    for q in [c.qa_per_entity, ow_qa] {
        if q > c.min_attributes {
            return Err(CorpusError::InvalidCounts(format!(
                "{q} QA pairs per entity exceeds the minimum of {} attributes",
                c.min_attributes
            )));
        }
    }
    let domains: BTreeSet<&String> =
        c.oldworld.keys().chain(c.train.keys()).chain(std::iter::once(&c.test_domain)).collect();
    for d in &domains {
        let ds = schema.domain(d).ok_or_else(|| CorpusError::InvalidCounts(format!("unknown domain {d}")))?;
        if ds.attributes.len() < c.max_attributes.min(ds.attributes.len()).max(c.min_attributes) {
            return Err(CorpusError::InvalidCounts(format!(
                "domain {d} has {} attributes, fewer than min_attributes {}",
                ds.attributes.len(),
                c.min_attributes
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Partition every attribute's value space into a test-only share and a
    // share for everything else, so no test answer is ever a training answer
    // of the same slot.
    let mut spaces: BTreeMap<(String, String), ValueSpace> = BTreeMap::new();
    for d in &domains {
        let ds = schema.domain(d).unwrap();
        for a in &ds.attributes {
            let template = ValueTemplate::parse(&a.value, &schema.pools)?;
            let size = template.size();
            let key = format!("{}.{}", ds.name, a.name);
            if !(2..=50_000_000).contains(&size) {
                return Err(CorpusError::VocabularyExhausted { attribute: key });
            }
            let mut all: Vec<u64> = (0..size).collect();
            all.shuffle(&mut rng);
            let n_res = ((size as f64) * c.test_value_fraction).ceil() as usize;
            let n_res = n_res.clamp(1, size as usize - 1);
            let open = all.split_off(n_res);
            spaces.insert((ds.name.clone(), a.name.clone()), ValueSpace { template, reserved: all, open });
        }
    }

    let mut plan: Vec<(Split, String)> = Vec::new();
    for (d, &n) in &c.oldworld {
        plan.extend(std::iter::repeat_n((Split::OldworldDocs, d.clone()), n));
    }
    for (d, &n) in &c.train {
        plan.extend(std::iter::repeat_n((Split::TrainDocs, d.clone()), n));
    }
    plan.extend(std::iter::repeat_n((Split::TestDocs, c.test_domain.clone()), c.test));

    let mut titles: HashSet<String> = HashSet::new();
    let mut bundle = CorpusBundle::default();
    let mut entities = Vec::with_capacity(plan.len());
    for (idx, (split, domain)) in plan.into_iter().enumerate() {
        let ds = schema.domain(&domain).unwrap();
        let title_t = ValueTemplate::parse(&ds.title, &schema.pools)?;
        let title = {
            let mut tries = 0;
            loop {
                let t = title_t.render(rng.gen_range(0..title_t.size()));
                if titles.insert(t.clone()) {
                    break t;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(CorpusError::VocabularyExhausted { attribute: format!("{domain}.title") });
                }
            }
        };
        let n_attr = rng.gen_range(c.min_attributes..=c.max_attributes.min(ds.attributes.len()));
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, ds.attributes.len(), n_attr).into_vec();
        chosen.sort_unstable();
        let mut attributes: Vec<(String, String)> = Vec::with_capacity(n_attr);
        for ai in chosen {
            let a = &ds.attributes[ai];
            let space = &spaces[&(domain.clone(), a.name.clone())];
            let pool = if split == Split::TestDocs { &space.reserved } else { &space.open };
            let mut tries = 0;
            let value = loop {
                let v = space.template.render(*pool.choose(&mut rng).unwrap());
                let clash = overlaps(&v, &title) || attributes.iter().any(|(_, o)| overlaps(&v, o));
                if !clash {
                    break v;
                }
                tries += 1;
                if tries > 1000 {
                    return Err(CorpusError::VocabularyExhausted { attribute: format!("{domain}.{}", a.name) });
                }
            };
            attributes.push((a.name.clone(), value));
        }
        let entity = Entity { id: format!("e{idx:05}"), domain: domain.clone(), title, attributes };
        let doc = render_document(ds, &entity, rng.gen())?;
        let n_tokens = pieces(&doc.text).len() + 1;
        if n_tokens > c.max_doc_tokens {
            return Err(CorpusError::DocumentTooLong { doc: doc.id, tokens: n_tokens, limit: c.max_doc_tokens });
        }
        let n_qa = if split == Split::OldworldDocs { ow_qa } else { c.qa_per_entity };
        let mut qa_attrs: Vec<usize> = rand::seq::index::sample(&mut rng, entity.attributes.len(), n_qa).into_vec();
        qa_attrs.sort_unstable();
        let qas = qa_attrs
            .into_iter()
            .map(|i| make_qa(ds, &entity, &entity.attributes[i].0))
            .collect::<Result<Vec<_>, _>>()?;
        match split {
            Split::OldworldDocs => {
                bundle.oldworld_docs.push(doc);
                bundle.oldworld_qa.extend(qas);
            }
            Split::TrainDocs => {
                bundle.train_docs.push(doc);
                bundle.train_qa.extend(qas);
            }
            _ => {
                bundle.test_docs.push(doc);
                bundle.test_qa.extend(qas);
            }
        }
        entities.push((split, entity));
    }

    if c.retention > bundle.oldworld_qa.len() {
        return Err(CorpusError::InvalidCounts(format!(
            "{} retention QA requested but only {} old-world QA exist",
            c.retention,
            bundle.oldworld_qa.len()
        )));
    }
    let mut picks = rand::seq::index::sample(&mut rng, bundle.oldworld_qa.len(), c.retention).into_vec();
    picks.sort_unstable();
    bundle.retention_qa = picks
        .into_iter()
        .map(|i| {
            let q = &bundle.oldworld_qa[i];
            QaPair { id: format!("ret-{}", q.id.trim_start_matches("qa-")), ..q.clone() }
        })
        .collect();

    debug_assert!(bundle.validate().is_empty());
    Ok(GeneratedCorpus { bundle, entities })
}

fn fill(template: &str, title: &str, value: &str) -> String {
    template.replace("{title}", title).replace("{value}", value)
}

fn doc_id(entity: &Entity) -> String {
    format!("doc-{}", entity.id)
}

/// Renders an entity as a document: a title sentence followed by the facts
/// in a seed-dependent order. At most half of the fact sentences restate the
/// title; the rest rely on coreference.
pub fn render_document(domain: &DomainSchema, entity: &Entity, style_seed: u64) -> Result<Document, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let mut sentences = vec![fill(domain.intro.choose(&mut rng).unwrap(), &entity.title, "")];
    let mut order: Vec<usize> = (0..entity.attributes.len()).collect();
    order.shuffle(&mut rng);
    let mut titled_left = entity.attributes.len() / 2;
    for i in order {
        let (name, value) = &entity.attributes[i];
        let a = domain
            .attribute(name)
            .ok_or_else(|| CorpusError::UnknownAttribute { entity: entity.id.clone(), attribute: name.clone() })?;
        let use_title = titled_left > 0 && !a.titled.is_empty() && rng.gen_bool(0.5);
        let template = if use_title {
            titled_left -= 1;
            a.titled.choose(&mut rng).unwrap()
        } else {
            a.coref.choose(&mut rng).unwrap()
        };
        sentences.push(fill(template, &entity.title, value));
    }
    Ok(Document {
        id: doc_id(entity),
        entity_id: entity.id.clone(),
        domain: entity.domain.clone(),
        title: entity.title.clone(),
        text: sentences.join(" "),
    })
}

pub fn make_qa(domain: &DomainSchema, entity: &Entity, attribute: &str) -> Result<QaPair, CorpusError> {
    let unknown = || CorpusError::UnknownAttribute { entity: entity.id.clone(), attribute: attribute.to_string() };
    let value = entity.value(attribute).ok_or_else(unknown)?;
    let a = domain.attribute(attribute).ok_or_else(unknown)?;
    Ok(QaPair {
        id: format!("qa-{}-{}", entity.id, attribute),
        doc_id: doc_id(entity),
        domain: entity.domain.clone(),
        question: fill(&a.question, &entity.title, value),
        answer: value.to_string(),
    })
}
