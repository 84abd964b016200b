//! Closed-book, open-book and few-shot QA evaluation, answer metrics,
//! document perplexity and the retention probe.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, Document, QaPair};
use crate::curriculum::{build_doc_example, encode_prompt, DocWeighting, TrainExample};
use crate::model::{ModelError, ModelState, Reduction};
use crate::tokenizer::{A_MARK, BOS, NEWLINE, PAD, Q_MARK};

/// Longest generated answer, in tokens.
pub const MAX_ANSWER_TOKENS: usize = 24;
const DECODE_BATCH: usize = 32;
const SCORE_BATCH: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty QA set")]
    Empty,
    #[error("open-book evaluation: document {doc_id} of {qa_id} is not in the bundle")]
    MissingDoc { qa_id: String, doc_id: String },
    #[error("few-shot evaluation needs {k} exemplars, only {available} available")]
    Exemplars { k: usize, available: usize },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing report: {0}")]
    Io(String),
}

// --------------------------------------------------------------- metrics ---

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.chars().flat_map(char::to_lowercase).filter(|c| !c.is_ascii_punctuation()).collect();
    lowered.split_whitespace().filter(|w| !ARTICLES.contains(w)).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

pub fn answer_recall(pred: &str, gold: &str) -> bool {
    normalize(pred).contains(&normalize(gold))
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 of token-level longest common subsequence on normalized text.
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let (p, g) = (normalize(pred), normalize(gold));
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let l = lcs_len(&p, &g);
    if l == 0 {
        return 0.0;
    }
    let prec = l as f64 / p.len() as f64;
    let rec = l as f64 / g.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

// ------------------------------------------------------------ evaluation ---

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    ClosedBook,
    OpenBook,
    FewShot { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub exact_match: bool,
    pub recall: bool,
    pub rouge_l: f64,
    /// The answer ended with a newline rather than running out of budget.
    pub well_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: EvalMode,
    pub count: usize,
    pub exact_match: f64,
    pub recall: f64,
    pub rouge_l: f64,
    pub format_rate: f64,
    #[serde(default)]
    pub doc_perplexity: Option<f64>,
    #[serde(default)]
    pub retention_em: Option<f64>,
    pub records: Vec<QaRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, json: &Path, csv_path: &Path) -> Result<(), EvalError> {
        let io = |e: &dyn std::fmt::Display| EvalError::Io(e.to_string());
        std::fs::write(json, self.to_json()).map_err(|e| io(&e))?;
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| io(&e))?;
        w.write_record(["id", "question", "gold", "prediction", "exact_match", "recall", "rouge_l", "well_formed"])
            .map_err(|e| io(&e))?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                &r.question,
                &r.gold,
                &r.prediction,
                &r.exact_match.to_string(),
                &r.recall.to_string(),
                &format!("{:.6}", r.rouge_l),
                &r.well_formed.to_string(),
            ])
            .map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))
    }
}

/// Tokens that end decoding besides the newline.
pub fn stop_tokens() -> HashSet<u32> {
    [PAD, BOS, Q_MARK].into_iter().collect()
}

/// Builds the prompt for one question. Open-book prompts put the source
/// document first and drop its oldest tokens when the prompt would not leave
/// room for an answer.
fn prompt(
    model: &ModelState<f32>,
    qa: &QaPair,
    mode: EvalMode,
    docs: &HashMap<&str, &Document>,
    shots: &[Vec<u32>],
) -> Result<Vec<u32>, EvalError> {
    let vocab = &model.vocab;
    let q = encode_prompt(vocab, &qa.question);
    let budget = model.config.ctx.saturating_sub(MAX_ANSWER_TOKENS.min(model.config.ctx / 4)).max(q.len());
    let mut context: Vec<u32> = match mode {
        EvalMode::ClosedBook => Vec::new(),
        EvalMode::OpenBook => {
            let doc = docs
                .get(qa.doc_id.as_str())
                .ok_or_else(|| EvalError::MissingDoc { qa_id: qa.id.clone(), doc_id: qa.doc_id.clone() })?;
            let mut c = vocab.encode(&doc.text);
            c.push(NEWLINE);
            c
        }
        EvalMode::FewShot { .. } => shots.iter().flatten().copied().collect(),
    };
    let room = budget.saturating_sub(q.len());
    if context.len() > room {
        context.drain(..context.len() - room);
    }
    if context.is_empty() {
        return Ok(q);
    }
    let mut out = vec![BOS];
    out.extend(context);
    out.extend(&q[1..]);
    Ok(out)
}

/// Few-shot exemplars: `k` pairs sampled from `pool` with a fixed seed,
/// each encoded as `Q: q \n A: a \n`.
pub fn fewshot_exemplars(
    model: &ModelState<f32>,
    pool: &[QaPair],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>, EvalError> {
    if pool.len() < k {
        return Err(EvalError::Exemplars { k, available: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, pool.len(), k).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|i| {
            let qa = &pool[i];
            let mut t = model.vocab.encode(&format!("Q: {}\nA: {}", qa.question, qa.answer));
            t.push(NEWLINE);
            t
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    /// Pool for few-shot exemplars.
    pub exemplar_pool: &'a [QaPair],
    pub exemplar_seed: u64,
}

/// Decodes an answer for every question and scores it against the gold
/// answer. Records are sorted by question id.
pub fn evaluate_qa(
    model: &ModelState<f32>,
    split: &str,
    qas: &[QaPair],
    bundle: &CorpusBundle,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if qas.is_empty() {
        return Err(EvalError::Empty);
    }
    let docs = bundle.doc_index();
    let shots = match mode {
        EvalMode::FewShot { k } => fewshot_exemplars(model, opts.exemplar_pool, k, opts.exemplar_seed)?,
        _ => Vec::new(),
    };
    let mut sorted: Vec<&QaPair> = qas.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let stop = stop_tokens();
    let mut records = Vec::with_capacity(sorted.len());
    for chunk in sorted.chunks(DECODE_BATCH) {
        let prompts = chunk.iter().map(|qa| prompt(model, qa, mode, &docs, &shots)).collect::<Result<Vec<_>, _>>()?;
        let outs = model.greedy_decode_batch(&prompts, MAX_ANSWER_TOKENS, &stop)?;
        for (qa, out) in chunk.iter().zip(outs) {
            let well_formed = out.last() == Some(&NEWLINE);
            let body: Vec<u32> =
                out.into_iter().take_while(|t| *t != NEWLINE && !stop.contains(t) && *t != A_MARK).collect();
            let prediction = model.vocab.decode(&body);
            records.push(QaRecord {
                id: qa.id.clone(),
                question: qa.question.clone(),
                gold: qa.answer.clone(),
                exact_match: exact_match(&prediction, &qa.answer),
                recall: answer_recall(&prediction, &qa.answer),
                rouge_l: rouge_l(&prediction, &qa.answer),
                prediction,
                well_formed,
            });
        }
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&QaRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        split: split.to_string(),
        mode,
        count: records.len(),
        exact_match: mean(&|r| r.exact_match as u8 as f64),
        recall: mean(&|r| r.recall as u8 as f64),
        rouge_l: mean(&|r| r.rouge_l),
        format_rate: mean(&|r| r.well_formed as u8 as f64),
        doc_perplexity: None,
        retention_em: None,
        records,
    })
}

/// Sum of negative log-likelihood and number of scored tokens.
pub fn nll_sum(model: &ModelState<f32>, examples: &[TrainExample]) -> Result<(f64, f64), EvalError> {
    let mut sum = 0.0;
    let mut count = 0.0;
    for chunk in examples.chunks(SCORE_BATCH) {
        let batch: Vec<_> = chunk.iter().map(TrainExample::scored).collect();
        let w: f64 = chunk.iter().flat_map(|e| &e.weights).sum();
        sum += model.loss(&batch, Reduction::TokenMean)? * w;
        count += w;
    }
    Ok((sum, count))
}

/// `exp` of the mean NLL over every token of every document (`<bos>`
/// prefixed, unweighted).
pub fn doc_perplexity(model: &ModelState<f32>, docs: &[Document]) -> Result<f64, EvalError> {
    if docs.is_empty() {
        return Err(EvalError::Empty);
    }
    let examples = docs
        .iter()
        .map(|d| build_doc_example(d, &model.vocab, DocWeighting::Uniform, None, model.config.ctx))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| EvalError::Data(e.to_string()))?;
    let (sum, count) = nll_sum(model, &examples)?;
    Ok((sum / count).exp())
}

/// Closed-book exact match on old-world QA.
pub fn retention_probe(model: &ModelState<f32>, retention: &[QaPair], bundle: &CorpusBundle) -> Result<f64, EvalError> {
    Ok(evaluate_qa(model, "retention_qa", retention, bundle, EvalMode::ClosedBook, &EvalOptions::default())?
        .exact_match)
}
