//! Base training on the old-world corpus: produces the knowledge-bearing,
//! QA-format-competent starting point every curriculum builds on.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, Document, QaPair};
use crate::curriculum::{
    build_doc_example, build_open_book_example, build_qa_example, train_schedule, CurriculumError, DocWeighting,
    EpochHook, PhaseLog,
};
use crate::eval::{doc_perplexity, evaluate_qa, EvalError, EvalMode, EvalOptions};
use crate::model::{ModelConfig, ModelError, ModelState};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecipe {
    /// Share of documents among the examples of an epoch; 0.5 gives one QA
    /// pair per document.
    pub doc_fraction: f64,
    /// Share of the QA pairs of an epoch shown open-book, with a
    /// counterfactual document in the prompt (see [`counterfactual_pairs`]).
    pub open_book_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub retention_threshold: f64,
    pub ppl_threshold: f64,
    pub format_threshold: f64,
}

impl Default for BaseRecipe {
    fn default() -> Self {
        Self {
            doc_fraction: 0.5,
            open_book_fraction: 0.25,
            epochs: 60,
            lr: 1e-3,
            batch_size: 16,
            retention_threshold: 0.8,
            ppl_threshold: 1.2,
            format_threshold: 0.99,
        }
    }
}

impl BaseRecipe {
    pub fn validate(&self) -> Result<(), BaseError> {
        let ok = self.doc_fraction > 0.0
            && self.doc_fraction < 1.0
            && (0.0..=1.0).contains(&self.open_book_fraction)
            && self.epochs >= 1
            && self.lr > 0.0
            && self.batch_size >= 1
            && self.retention_threshold > 0.0
            && self.retention_threshold <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(BaseError::Recipe(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    pub retention_em: f64,
    pub oldworld_ppl: f64,
    pub format_rate: f64,
    pub test_closed_book_em: Option<f64>,
    pub log: PhaseLog,
}

#[derive(Debug, thiserror::Error)]
pub enum BaseError {
    #[error("invalid base recipe {0}")]
    Recipe(String),
    #[error("base training needs old-world documents, QA pairs and retention QA")]
    NoOldWorld,
    #[error(
        "base checkpoint misses its targets (retention EM {:.3}, old-world PPL {:.3}, format rate {:.3}); \
         try a larger model or more epochs", report.retention_em, report.oldworld_ppl, report.format_rate
    )]
    Threshold { report: Box<BaseReport>, model: Box<ModelState<f32>> },
    #[error(transparent)]
    Train(#[from] CurriculumError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Trains a fresh model on shuffled old-world documents and QA pairs.
///
/// Every epoch holds all documents plus as many QA pairs as `doc_fraction`
/// implies, taken from a seeded permutation that rotates across epochs so
/// all pairs are covered. A share of those pairs is shown open-book.
pub fn pretrain_base(
    bundle: &CorpusBundle,
    vocab: Vocab,
    mut config: ModelConfig,
    recipe: &BaseRecipe,
    seed: u64,
    hook: &mut EpochHook,
) -> Result<(ModelState<f32>, BaseReport), BaseError> {
    recipe.validate()?;
    if bundle.oldworld_docs.is_empty() || bundle.oldworld_qa.is_empty() || bundle.retention_qa.is_empty() {
        return Err(BaseError::NoOldWorld);
    }
    config.vocab_size = vocab.len();
    config.seed = seed;
    let mut model = ModelState::init(config, vocab)?;
    let ctx = model.config.ctx;
    let mut examples = Vec::with_capacity(bundle.oldworld_docs.len() + bundle.oldworld_qa.len());
    for d in &bundle.oldworld_docs {
        examples.push(build_doc_example(d, &model.vocab, DocWeighting::Uniform, None, ctx)?);
    }
    let n_docs = examples.len();
    for q in &bundle.oldworld_qa {
        examples.push(build_qa_example(q, &model.vocab, ctx)?);
    }
    let n_qa = examples.len() - n_docs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    for (q, doc) in counterfactual_pairs(bundle, &mut rng)? {
        examples.push(build_open_book_example(&q, &doc, &model.vocab, ctx)?);
    }
    let per_epoch = ((n_docs as f64) * (1.0 - recipe.doc_fraction) / recipe.doc_fraction).round().max(1.0) as usize;

    let mut qa_order: Vec<usize> = (n_docs..n_docs + n_qa).collect();
    qa_order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut schedule = Vec::with_capacity(recipe.epochs);
    for _ in 0..recipe.epochs {
        let mut epoch: Vec<usize> = (0..n_docs).collect();
        for _ in 0..per_epoch {
            if cursor == qa_order.len() {
                qa_order.shuffle(&mut rng);
                cursor = 0;
            }
            // Open-book copies sit `n_qa` after their closed-book originals.
            let open = rng.gen_bool(recipe.open_book_fraction);
            epoch.push(qa_order[cursor] + if open { n_qa } else { 0 });
            cursor += 1;
        }
        epoch.shuffle(&mut rng);
        schedule.push(epoch);
    }
    let (log, _) = train_schedule(&mut model, "base", &examples, &schedule, recipe.lr, recipe.batch_size, hook)?;

    let retention = evaluate_qa(
        &model,
        "retention_qa",
        &bundle.retention_qa,
        bundle,
        EvalMode::ClosedBook,
        &EvalOptions::default(),
    )?;
    let oldworld_ppl = doc_perplexity(&model, &bundle.oldworld_docs)?;
    let test_em = if bundle.test_qa.is_empty() {
        None
    } else {
        Some(
            evaluate_qa(&model, "test_qa", &bundle.test_qa, bundle, EvalMode::ClosedBook, &EvalOptions::default())?
                .exact_match,
        )
    };
    let report = BaseReport {
        retention_em: retention.exact_match,
        oldworld_ppl,
        format_rate: retention.format_rate,
        test_closed_book_em: test_em,
        log,
    };
    if report.retention_em < recipe.retention_threshold
        || report.oldworld_ppl > recipe.ppl_threshold
        || report.format_rate < recipe.format_threshold
    {
        return Err(BaseError::Threshold { report: Box::new(report), model: Box::new(model) });
    }
    Ok((model, report))
}

/// Question with the entity title masked; pairs sharing it ask for the same
/// attribute of different entities.
fn slot(q: &QaPair, title: &str) -> String {
    format!("{}\u{0}{}", q.domain, q.question.replace(title, "\u{1}"))
}

/// One reading-comprehension pair per old-world QA pair. The answer inside
/// the document is replaced by the answer of another pair from the same
/// slot, and that replacement becomes the gold answer, so only the context
/// (not memory) yields it. Pairs whose slot has a single distinct answer, or
/// whose answer is not a unique substring of the document, keep the
/// original document.
pub fn counterfactual_pairs(
    bundle: &CorpusBundle,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(QaPair, Document)>, CurriculumError> {
    let docs = bundle.doc_index();
    let doc_of = |q: &QaPair| {
        docs.get(q.doc_id.as_str())
            .copied()
            .ok_or_else(|| CurriculumError::Data(format!("QA pair {} links to missing document {}", q.id, q.doc_id)))
    };
    let mut by_slot: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for q in &bundle.oldworld_qa {
        by_slot.entry(slot(q, &doc_of(q)?.title)).or_default().push(&q.answer);
    }
    let mut out = Vec::with_capacity(bundle.oldworld_qa.len());
    for q in &bundle.oldworld_qa {
        let doc = doc_of(q)?;
        let pool: Vec<&str> = by_slot[&slot(q, &doc.title)]
            .iter()
            .copied()
            .filter(|a| *a != q.answer && !a.contains(q.answer.as_str()) && !q.answer.contains(*a))
            .collect();
        let unique = doc.text.matches(q.answer.as_str()).count() == 1;
        match pool.choose(rng) {
            Some(&swap) if unique && !doc.text.contains(swap) => {
                let mut d = doc.clone();
                d.text = doc.text.replace(q.answer.as_str(), swap);
                let mut cq = q.clone();
                cq.answer = swap.to_string();
                out.push((cq, d));
            }
            _ => out.push((q.clone(), doc.clone())),
        }
    }
    Ok(out)
}
