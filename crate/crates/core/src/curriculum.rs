//! Training examples with loss masks, data arrangements, curriculum presets
//! and the phase runner.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusBundle, Document, QaPair, Split};
use crate::model::{decays, ModelError, ModelState, Reduction, Scored};
use crate::optim::{lr_at, AdamW, OptimConfig, OptimError};
use crate::tokenizer::{Vocab, BOS, NEWLINE};

/// Initial learning rate of phases that contain documents.
pub const DOC_LR: f64 = 3e-5;
/// Initial learning rate of pure QA phases.
pub const QA_LR: f64 = 5e-6;
pub const DEFAULT_BATCH: usize = 32;
pub const ANCHOR_QA: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum CurriculumError {
    #[error("{0}")]
    Data(String),
    #[error("unknown preset {name:?}; valid presets: {}", valid.join(", "))]
    UnknownPreset { name: String, valid: Vec<String> },
    #[error("non-finite loss in phase {phase} at step {step}: {detail}")]
    Numerical { phase: String, step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// -------------------------------------------------------------- examples ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Document,
    Qa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    /// `weights[t]` weights the prediction of `tokens[t + 1]`.
    pub weights: Vec<f64>,
    pub kind: ExampleKind,
    /// Id of the source document or QA pair.
    pub source: String,
    /// Document the example is about.
    pub doc_id: String,
}

impl TrainExample {
    pub fn scored(&self) -> Scored<'_> {
        Scored { tokens: &self.tokens, weights: &self.weights }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DocWeighting {
    #[default]
    Uniform,
    /// Tokens inside an answer span get `answer`, all others `other`.
    AnswerUpweighted { answer: f64, other: f64 },
}

impl DocWeighting {
    pub fn upweighted() -> Self {
        DocWeighting::AnswerUpweighted { answer: 1.0, other: 0.5 }
    }
}

pub fn qa_prompt(question: &str) -> String {
    format!("Q: {question}\nA:")
}

/// `<bos>` followed by the prompt tokens.
pub fn encode_prompt(vocab: &Vocab, question: &str) -> Vec<u32> {
    let mut t = vec![BOS];
    t.extend(vocab.encode(&qa_prompt(question)));
    t
}

fn overlong(what: &str, id: &str, len: usize, ctx: usize) -> CurriculumError {
    CurriculumError::Data(format!("{what} {id} encodes to {len} tokens, above the context length {ctx}"))
}

/// Document example for the document objective: `<bos>` + text, no end
/// marker, every predicted position weighted.
pub fn build_doc_example(
    doc: &Document,
    vocab: &Vocab,
    weighting: DocWeighting,
    answers: Option<&[String]>,
    ctx: usize,
) -> Result<TrainExample, CurriculumError> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(&doc.text));
    if tokens.len() > ctx {
        return Err(overlong("document", &doc.id, tokens.len(), ctx));
    }
    if tokens.len() < 2 {
        return Err(CurriculumError::Data(format!("document {} is empty", doc.id)));
    }
    let weights = match weighting {
        DocWeighting::Uniform => vec![1.0; tokens.len() - 1],
        DocWeighting::AnswerUpweighted { answer, other } => {
            let answers = answers.ok_or_else(|| {
                CurriculumError::Data(format!("answer-weighted document {} needs its answers", doc.id))
            })?;
            let mut inside = vec![false; tokens.len()];
            for a in answers {
                let span = vocab.encode(a);
                if span.is_empty() {
                    continue;
                }
                for start in 1..tokens.len() {
                    if tokens[start..].starts_with(&span) {
                        inside[start..start + span.len()].iter_mut().for_each(|x| *x = true);
                    }
                }
            }
            (1..tokens.len()).map(|i| if inside[i] { answer } else { other }).collect()
        }
    };
    Ok(TrainExample { tokens, weights, kind: ExampleKind::Document, source: doc.id.clone(), doc_id: doc.id.clone() })
}

/// QA example for the answer objective: `<bos> Q: q \n A: a \n` with unit
/// weight exactly on the answer tokens and the closing newline.
pub fn build_qa_example(qa: &QaPair, vocab: &Vocab, ctx: usize) -> Result<TrainExample, CurriculumError> {
    let mut tokens = encode_prompt(vocab, &qa.question);
    let prompt_len = tokens.len();
    tokens.extend(vocab.encode(&qa.answer));
    tokens.push(NEWLINE);
    if tokens.len() > ctx {
        return Err(overlong("QA pair", &qa.id, tokens.len(), ctx));
    }
    let weights = (1..tokens.len()).map(|i| if i >= prompt_len { 1.0 } else { 0.0 }).collect();
    Ok(TrainExample { tokens, weights, kind: ExampleKind::Qa, source: qa.id.clone(), doc_id: qa.doc_id.clone() })
}

/// Reading-comprehension example: `<bos>`, the document, a newline, then the
/// QA prompt; only the answer and its terminating newline carry weight.
/// Matches the open-book evaluation prompt when no truncation is needed.
pub fn build_open_book_example(
    qa: &QaPair,
    doc: &Document,
    vocab: &Vocab,
    ctx: usize,
) -> Result<TrainExample, CurriculumError> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(&doc.text));
    tokens.push(NEWLINE);
    tokens.extend(&encode_prompt(vocab, &qa.question)[1..]);
    let prompt_len = tokens.len();
    tokens.extend(vocab.encode(&qa.answer));
    tokens.push(NEWLINE);
    if tokens.len() > ctx {
        return Err(overlong("open-book QA pair", &qa.id, tokens.len(), ctx));
    }
    let weights = (1..tokens.len()).map(|i| if i >= prompt_len { 1.0 } else { 0.0 }).collect();
    Ok(TrainExample { tokens, weights, kind: ExampleKind::Qa, source: qa.id.clone(), doc_id: qa.doc_id.clone() })
}

// ----------------------------------------------------------- arrangement ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Concatenate all datasets and reshuffle every epoch.
    #[default]
    Shuffled,
    /// Explicit QA/document arrangement.
    Arranged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    #[default]
    None,
    Grouped,
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QaPosition {
    #[default]
    Before,
    After,
}

/// One document with its linked QA pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Group<T> {
    pub qas: Vec<T>,
    pub doc: T,
}

/// Orders repeated QA and document items.
///
/// Interleaved: `epochs` cycles, each visiting every group once as `[Q.., D]`
/// (before) or `[D, Q..]` (after), group order reshuffled per cycle.
/// Grouped: group order shuffled once; each group emits its QA block
/// `epochs` times and its document `epochs` times, QA first or last.
/// Passing no RNG keeps the input order.
pub fn arrange<T: Clone>(
    groups: &[Group<T>],
    arrangement: Arrangement,
    position: QaPosition,
    epochs: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<T>, CurriculumError> {
    if epochs == 0 {
        return Err(CurriculumError::Data("epochs must be at least 1".into()));
    }
    if groups.iter().any(|g| g.qas.is_empty()) {
        return Err(CurriculumError::Data("arrangement needs at least one QA pair per document".into()));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut out = Vec::with_capacity(epochs * groups.iter().map(|g| g.qas.len() + 1).sum::<usize>());
    match arrangement {
        Arrangement::None => {
            return Err(CurriculumError::Data("arrange called without an arrangement".into()));
        }
        Arrangement::Interleaved => {
            for _ in 0..epochs {
                if let Some(r) = rng.as_deref_mut() {
                    order.shuffle(r);
                }
                for &g in &order {
                    let g = &groups[g];
                    match position {
                        QaPosition::Before => {
                            out.extend(g.qas.iter().cloned());
                            out.push(g.doc.clone());
                        }
                        QaPosition::After => {
                            out.push(g.doc.clone());
                            out.extend(g.qas.iter().cloned());
                        }
                    }
                }
            }
        }
        Arrangement::Grouped => {
            if let Some(r) = rng {
                order.shuffle(r);
            }
            for &g in &order {
                let g = &groups[g];
                let qa_block = (0..epochs).flat_map(|_| g.qas.iter().cloned());
                let doc_block = std::iter::repeat_n(g.doc.clone(), epochs);
                match position {
                    QaPosition::Before => {
                        out.extend(qa_block);
                        out.extend(doc_block);
                    }
                    QaPosition::After => {
                        out.extend(doc_block);
                        out.extend(qa_block);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- specs ---

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DomainFilter {
    #[default]
    All,
    /// The domain of the test documents.
    TestDomain,
    /// Every domain except the test domain.
    OtherDomains,
    Only(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub split: Split,
    #[serde(default)]
    pub domains: DomainFilter,
    #[serde(default)]
    pub weighting: DocWeighting,
    /// Keep only the first `limit` records after filtering.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl DatasetRef {
    pub fn new(split: Split, domains: DomainFilter) -> Self {
        Self { split, domains, weighting: DocWeighting::Uniform, limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: String,
    pub datasets: Vec<DatasetRef>,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default)]
    pub arrangement: Arrangement,
    #[serde(default)]
    pub qa_position: QaPosition,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl PhaseSpec {
    pub fn has_docs(&self) -> bool {
        self.datasets.iter().any(|d| d.split.is_docs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalPlan {
    /// After every epoch of every phase.
    PerEpoch,
    /// After every phase.
    #[default]
    PhaseEnd,
    /// Only once training has finished.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub name: String,
    pub phases: Vec<PhaseSpec>,
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalPlan,
}

impl CurriculumSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CurriculumError> {
        serde_json::from_str(s).map_err(|e| CurriculumError::Data(format!("curriculum config: {e}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }

    pub fn validate(&self, bundle: &CorpusBundle) -> Result<(), CurriculumError> {
        if self.phases.is_empty() {
            return Err(CurriculumError::Data(format!("curriculum {} has no phases", self.name)));
        }
        for p in &self.phases {
            if p.epochs == 0 || p.batch_size == 0 || p.lr.is_nan() || p.lr <= 0.0 {
                return Err(CurriculumError::Data(format!(
                    "phase {} needs epochs >= 1, batch_size >= 1 and lr > 0",
                    p.name
                )));
            }
            if p.datasets.is_empty() {
                return Err(CurriculumError::Data(format!("phase {} has no datasets", p.name)));
            }
            for d in &p.datasets {
                if bundle.split_len(d.split) == 0 {
                    return Err(CurriculumError::Data(format!(
                        "phase {} references empty split {}",
                        p.name,
                        d.split.name()
                    )));
                }
            }
            if (p.mixing == Mixing::Arranged) != (p.arrangement != Arrangement::None) {
                return Err(CurriculumError::Data(format!(
                    "phase {}: arranged mixing and an arrangement must be set together",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

// --------------------------------------------------------------- presets ---

/// Knobs applied while expanding a preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    pub doc_epochs: usize,
    pub it_epochs: usize,
    pub pit_epochs: usize,
    /// Epochs of the single phase of the mix-all setting.
    pub mix_all_epochs: usize,
    pub doc_lr: f64,
    pub qa_lr: f64,
    /// Multiplies every learning rate.
    pub lr_scale: f64,
    pub batch_size: usize,
    /// Retention QA pairs mixed into pure continued pre-training.
    pub anchor_qa: usize,
    pub seed: u64,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            doc_epochs: 10,
            it_epochs: 1,
            pit_epochs: 3,
            mix_all_epochs: 3,
            doc_lr: DOC_LR,
            qa_lr: QA_LR,
            lr_scale: 1.0,
            batch_size: DEFAULT_BATCH,
            anchor_qa: ANCHOR_QA,
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 19] = [
    "cont_pretrain",
    "standard_it",
    "it_no_forget",
    "it_no_train_doc",
    "weighted_cont_pretrain",
    "adapted_cont_pretrain",
    "mix_all",
    "pit_qa_only",
    "pit_seq",
    "pit",
    "pit_1ep",
    "pit_grouped_before",
    "pit_grouped_after",
    "pit_interleaved_before",
    "pit_interleaved_after",
    "pit_minus",
    "pit_pp",
    "standard_it_cross",
    "pit_cross",
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.to_vec()
}

/// Expands a named setting into its phases.
pub fn preset(name: &str, o: &PresetOptions) -> Result<CurriculumSpec, CurriculumError> {
    use DomainFilter::{All, OtherDomains, TestDomain};
    let cross = name.ends_with("_cross");
    let train_dom = if cross { OtherDomains } else { TestDomain };
    let ds = |split: Split, f: &DomainFilter| DatasetRef::new(split, f.clone());
    let train_qa = || ds(Split::TrainQa, &train_dom);
    let train_doc = || ds(Split::TrainDocs, &train_dom);
    let test_doc = || ds(Split::TestDocs, &All);
    let anchor = || DatasetRef { limit: Some(o.anchor_qa), ..ds(Split::RetentionQa, &All) };
    let phase = |name: &str, datasets: Vec<DatasetRef>, epochs: usize| {
        let mut p = PhaseSpec {
            name: name.to_string(),
            datasets,
            mixing: Mixing::Shuffled,
            arrangement: Arrangement::None,
            qa_position: QaPosition::Before,
            epochs,
            lr: 0.0,
            batch_size: o.batch_size,
        };
        p.lr = if p.has_docs() { o.doc_lr } else { o.qa_lr } * o.lr_scale;
        p
    };
    let with_anchor = |mut d: Vec<DatasetRef>| {
        if o.anchor_qa > 0 {
            d.push(anchor());
        }
        d
    };
    let test_phase = || phase("test_doc", vec![test_doc()], o.doc_epochs);
    let arranged = |arrangement: Arrangement, qa_position: QaPosition| PhaseSpec {
        mixing: Mixing::Arranged,
        arrangement,
        qa_position,
        ..phase("train_qa+train_doc", vec![train_qa(), train_doc()], o.pit_epochs)
    };
    let phases = match name {
        "cont_pretrain" => vec![phase("test_doc", with_anchor(vec![test_doc()]), o.doc_epochs)],
        "standard_it" | "standard_it_cross" => vec![
            phase("train_doc+test_doc", vec![train_doc(), test_doc()], o.doc_epochs),
            phase("train_qa", vec![train_qa()], o.it_epochs),
        ],
        "it_no_forget" => vec![
            phase("train_doc+test_doc", vec![train_doc(), test_doc()], o.doc_epochs),
            phase("train_qa+test_doc", vec![train_qa(), test_doc()], o.it_epochs),
        ],
        "it_no_train_doc" => {
            vec![phase("test_doc", vec![test_doc()], o.doc_epochs), phase("train_qa", vec![train_qa()], o.it_epochs)]
        }
        "weighted_cont_pretrain" => {
            let weighted = DatasetRef { weighting: DocWeighting::upweighted(), ..test_doc() };
            vec![phase("test_doc_weighted", with_anchor(vec![weighted]), o.doc_epochs)]
        }
        "adapted_cont_pretrain" => vec![
            phase("train_doc", vec![train_doc()], o.doc_epochs),
            phase("test_doc", with_anchor(vec![test_doc()]), o.doc_epochs),
        ],
        "mix_all" => {
            vec![phase("train_qa+train_doc+test_doc", vec![train_qa(), train_doc(), test_doc()], o.mix_all_epochs)]
        }
        "pit_qa_only" => vec![phase("train_qa", vec![train_qa()], o.pit_epochs), test_phase()],
        "pit_seq" => vec![
            phase("train_qa", vec![train_qa()], o.pit_epochs),
            phase("train_doc", vec![train_doc()], o.pit_epochs),
            test_phase(),
        ],
        "pit" | "pit_cross" => {
            vec![phase("train_qa+train_doc", vec![train_qa(), train_doc()], o.pit_epochs), test_phase()]
        }
        "pit_1ep" => vec![phase("train_qa+train_doc", vec![train_qa(), train_doc()], 1), test_phase()],
        "pit_grouped_before" => vec![arranged(Arrangement::Grouped, QaPosition::Before), test_phase()],
        "pit_grouped_after" => vec![arranged(Arrangement::Grouped, QaPosition::After), test_phase()],
        "pit_interleaved_before" => vec![arranged(Arrangement::Interleaved, QaPosition::Before), test_phase()],
        "pit_interleaved_after" => vec![arranged(Arrangement::Interleaved, QaPosition::After), test_phase()],
        "pit_minus" => vec![
            phase("train_qa+train_doc", vec![train_qa(), train_doc()], o.pit_epochs),
            phase("train_qa", vec![train_qa()], o.pit_epochs),
            test_phase(),
        ],
        "pit_pp" => vec![
            phase("train_qa", vec![train_qa()], o.pit_epochs),
            phase("train_qa+train_doc", vec![train_qa(), train_doc()], o.pit_epochs),
            test_phase(),
        ],
        _ => {
            return Err(CurriculumError::UnknownPreset {
                name: name.to_string(),
                valid: preset_names().iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(CurriculumSpec { name: name.to_string(), phases, seed: o.seed, eval: EvalPlan::PhaseEnd })
}

// ------------------------------------------------------------- execution ---

fn keep_domain(filter: &DomainFilter, domain: &str, test_domain: &str) -> bool {
    match filter {
        DomainFilter::All => true,
        DomainFilter::TestDomain => domain == test_domain,
        DomainFilter::OtherDomains => domain != test_domain,
        DomainFilter::Only(v) => v.iter().any(|d| d == domain),
    }
}

/// Builds the examples of one dataset reference.
pub fn resolve_dataset(
    d: &DatasetRef,
    bundle: &CorpusBundle,
    vocab: &Vocab,
    ctx: usize,
) -> Result<Vec<TrainExample>, CurriculumError> {
    let test_domain = bundle.test_domain().unwrap_or_default();
    let limit = d.limit.unwrap_or(usize::MAX);
    let keep = |dom: &str| keep_domain(&d.domains, dom, &test_domain);
    let mut out = Vec::new();
    if d.split.is_docs() {
        let answers: HashMap<&str, Vec<String>> = if matches!(d.weighting, DocWeighting::AnswerUpweighted { .. }) {
            let mut m: HashMap<&str, Vec<String>> = HashMap::new();
            for s in Split::ALL.iter().filter(|s| !s.is_docs()) {
                for q in bundle.qas(*s) {
                    m.entry(q.doc_id.as_str()).or_default().push(q.answer.clone());
                }
            }
            m
        } else {
            HashMap::new()
        };
        for doc in bundle.docs(d.split).iter().filter(|x| keep(&x.domain)).take(limit) {
            let a = answers.get(doc.id.as_str()).map(Vec::as_slice);
            out.push(build_doc_example(doc, vocab, d.weighting, a.or(Some(&[])), ctx)?);
        }
    } else {
        for qa in bundle.qas(d.split).iter().filter(|x| keep(&x.domain)).take(limit) {
            out.push(build_qa_example(qa, vocab, ctx)?);
        }
    }
    Ok(out)
}

/// All examples of a phase, in dataset order.
pub fn phase_examples(
    phase: &PhaseSpec,
    bundle: &CorpusBundle,
    vocab: &Vocab,
    ctx: usize,
) -> Result<Vec<TrainExample>, CurriculumError> {
    let mut out = Vec::new();
    for d in &phase.datasets {
        let ex = resolve_dataset(d, bundle, vocab, ctx)?;
        if ex.is_empty() {
            return Err(CurriculumError::Data(format!(
                "dataset {} of phase {} selects no records",
                d.split.name(),
                phase.name
            )));
        }
        out.extend(ex);
    }
    Ok(out)
}

/// Example order for every epoch of a phase (indices into `examples`).
pub fn phase_schedule(
    phase: &PhaseSpec,
    examples: &[TrainExample],
    seed: u64,
) -> Result<Vec<Vec<usize>>, CurriculumError> {
    if examples.is_empty() {
        return Err(CurriculumError::Data(format!("phase {} has no examples", phase.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match phase.mixing {
        Mixing::Shuffled => Ok((0..phase.epochs)
            .map(|_| {
                let mut order: Vec<usize> = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect()),
        Mixing::Arranged => {
            let mut groups: BTreeMap<&str, Group<usize>> = BTreeMap::new();
            let mut qas: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, e) in examples.iter().enumerate() {
                match e.kind {
                    ExampleKind::Document => {
                        groups.insert(&e.doc_id, Group { qas: Vec::new(), doc: i });
                    }
                    ExampleKind::Qa => qas.entry(&e.doc_id).or_default().push(i),
                }
            }
            for (doc, q) in qas {
                match groups.get_mut(doc) {
                    Some(g) => g.qas = q,
                    None => {
                        return Err(CurriculumError::Data(format!(
                            "phase {}: QA pairs about {doc} have no document in the phase",
                            phase.name
                        )))
                    }
                }
            }
            if let Some((doc, _)) = groups.iter().find(|(_, g)| g.qas.is_empty()) {
                return Err(CurriculumError::Data(format!(
                    "phase {}: document {doc} has no linked QA pair",
                    phase.name
                )));
            }
            let groups: Vec<Group<usize>> = groups.into_values().collect();
            let stream = arrange(&groups, phase.arrangement, phase.qa_position, phase.epochs, Some(&mut rng))?;
            // Equal slices stand in for epochs so evaluation can follow them.
            let per = stream.len() / phase.epochs;
            Ok(stream.chunks(per).map(<[usize]>::to_vec).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    #[serde(default)]
    pub eval: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub name: String,
    pub examples: usize,
    pub steps: u64,
    pub lr: f64,
    pub epochs: Vec<EpochLog>,
}

/// Called after each epoch with the phase name and 1-based epoch; returns
/// optional metrics to store in the log.
pub type EpochHook<'a> =
    dyn FnMut(&ModelState<f32>, &str, usize) -> Result<Option<serde_json::Value>, CurriculumError> + 'a;

/// Trains one phase with a fresh optimizer and one cosine schedule spanning
/// all of its steps. Returns the optimizer state reached at the end.
pub fn run_phase(
    model: &mut ModelState<f32>,
    phase: &PhaseSpec,
    bundle: &CorpusBundle,
    seed: u64,
    hook: &mut EpochHook,
) -> Result<(PhaseLog, AdamW<f32>), CurriculumError> {
    let examples = phase_examples(phase, bundle, &model.vocab, model.config.ctx)?;
    let schedule = phase_schedule(phase, &examples, seed)?;
    train_schedule(model, &phase.name, &examples, &schedule, phase.lr, phase.batch_size, hook)
}

/// Runs a precomputed schedule (example indices per epoch) with a fresh
/// AdamW state and a cosine schedule over the total number of steps.
pub fn train_schedule(
    model: &mut ModelState<f32>,
    name: &str,
    examples: &[TrainExample],
    schedule: &[Vec<usize>],
    lr: f64,
    batch_size: usize,
    hook: &mut EpochHook,
) -> Result<(PhaseLog, AdamW<f32>), CurriculumError> {
    if batch_size == 0 {
        return Err(CurriculumError::Data(format!("phase {name}: batch size must be positive")));
    }
    let total: u64 = schedule.iter().map(|e| e.len().div_ceil(batch_size) as u64).sum();
    if total == 0 {
        return Err(CurriculumError::Data(format!("phase {name} has no examples")));
    }
    let cfg = OptimConfig::new(lr, total);
    cfg.validate().map_err(|e| CurriculumError::Data(e.to_string()))?;
    let mut opt = AdamW::new(model.params());
    let names = model.names().to_vec();
    let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    let mut log = PhaseLog { name: name.to_string(), examples: examples.len(), steps: total, lr, epochs: Vec::new() };
    let numerical = |step: u64, detail: String| CurriculumError::Numerical { phase: name.to_string(), step, detail };
    let mut step = 0u64;
    for (e, order) in schedule.iter().enumerate() {
        let mut loss_sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Scored> = chunk.iter().map(|&i| examples[i].scored()).collect();
            let (loss, grads) = model.loss_and_grads(&batch, Reduction::ExampleMean)?;
            if !loss.is_finite() {
                return Err(numerical(step + 1, format!("loss {loss}")));
            }
            let lr = lr_at(step, &cfg).map_err(|e| CurriculumError::Data(e.to_string()))?;
            opt.step(&cfg, model.params_mut(), &grads, &decay, &names, lr).map_err(|e| match e {
                OptimError::NonFinite { step, param } => numerical(step, format!("gradient of {param}")),
                other => CurriculumError::Data(other.to_string()),
            })?;
            step += 1;
            loss_sum += loss;
            n += 1;
        }
        let eval = hook(model, name, e + 1)?;
        log.epochs.push(EpochLog {
            phase: name.to_string(),
            epoch: e + 1,
            steps: step,
            mean_loss: loss_sum / n.max(1) as f64,
            eval,
        });
    }
    Ok((log, opt))
}

/// Runs every phase in order. Phase `i` is seeded from the curriculum seed
/// and `i`.
pub fn run_curriculum(
    model: &mut ModelState<f32>,
    spec: &CurriculumSpec,
    bundle: &CorpusBundle,
    hook: &mut EpochHook,
) -> Result<Vec<PhaseLog>, CurriculumError> {
    spec.validate(bundle)?;
    spec.phases
        .iter()
        .enumerate()
        .map(|(i, p)| run_phase(model, p, bundle, phase_seed(spec.seed, i), hook).map(|(log, _)| log))
        .collect()
}

pub fn phase_seed(seed: u64, phase: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(phase as u64 + 1)
}
