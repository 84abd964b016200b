//! Experiment runs: declarative run configs, per-phase checkpoints with
//! resume, immutable run manifests, sweeps and comparison reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseprep::{BaseError, BaseRecipe};
use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{CorpusBundle, CorpusError};
use crate::curriculum::{
    phase_seed, preset, run_phase, CurriculumError, CurriculumSpec, EvalPlan, PresetOptions, PRESETS,
};
use crate::eval::{doc_perplexity, evaluate_qa, retention_probe, EvalError, EvalMode, EvalOptions, EvalReport};
use crate::model::{ModelConfig, ModelState};
use crate::tokenizer::Vocab;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Output root for relative `--out` paths.
pub const OUT_ENV: &str = "PITLAB_OUT";
pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("resume mismatch at {path}: checkpoint was written by config {found}, this run is {expected}")]
    ResumeMismatch { path: PathBuf, expected: String, found: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// 1 usage, 2 data validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_) => 1,
            ExperimentError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<CurriculumError> for ExperimentError {
    fn from(e: CurriculumError) -> Self {
        match e {
            CurriculumError::Numerical { .. } => ExperimentError::Numerical(e.to_string()),
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for ExperimentError {
    fn from(e: EvalError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<CorpusError> for ExperimentError {
    fn from(e: CorpusError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<CheckpointError> for ExperimentError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => ExperimentError::Io { path, source },
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

impl From<BaseError> for ExperimentError {
    fn from(e: BaseError) -> Self {
        match e {
            BaseError::Train(t) => t.into(),
            other => ExperimentError::Data(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Resolves `out` against `$PITLAB_OUT` when it is relative.
pub fn output_path(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

/// Writes `contents` to a file that must not exist yet.
pub fn write_new(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(io(path))?;
    f.write_all(contents).map_err(io(path))
}

fn default_true() -> bool {
    true
}

/// Everything that affects a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub curriculum: CurriculumSpec,
    #[serde(default)]
    pub preset: Option<String>,
    /// Also score the final model open-book.
    #[serde(default = "default_true")]
    pub open_book: bool,
}

impl RunConfig {
    pub fn from_preset(name: &str, options: &PresetOptions) -> Result<Self, ExperimentError> {
        let curriculum = preset(name, options).map_err(|e| match e {
            CurriculumError::UnknownPreset { .. } => ExperimentError::Usage(e.to_string()),
            other => other.into(),
        })?;
        Ok(Self { curriculum, preset: Some(name.to_string()), open_book: true })
    }

    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(s).map_err(|e| ExperimentError::Data(format!("run config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Setting label used to group runs across seeds.
    pub fn setting(&self) -> &str {
        &self.curriculum.name
    }
}

/// Model shape and recipe for base pretraining. Defaults to the desk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ctx: usize,
    pub recipe: BaseRecipe,
}

impl Default for BaseConfig {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        Self { layers: d.layers, heads: d.heads, dim: d.dim, ctx: d.ctx, recipe: BaseRecipe::default() }
    }
}

impl BaseConfig {
    pub fn model(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig::new(self.layers, self.heads, self.dim, self.ctx, vocab_size, seed)
    }
}

/// SHA-256 over parameter names, shapes and raw bits.
pub fn model_hash(model: &ModelState<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).expect("config serializes"));
    for (name, t) in model.names().iter().zip(model.params()) {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    /// Optimizer steps taken so far within the phase.
    pub steps: u64,
    pub loss: f64,
    pub test_ppl: Option<f64>,
    pub test_em: Option<f64>,
    pub retention_em: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub examples: usize,
    pub steps: u64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub exact_match: f64,
    pub recall: f64,
    pub rouge_l: f64,
    pub open_book_em: Option<f64>,
    pub retention_em: f64,
    pub test_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: RunConfig,
    /// Curriculum seed followed by each phase's derived seed.
    pub seeds: Vec<u64>,
    pub corpus_hash: String,
    pub base_hash: String,
    pub preset: Option<String>,
    pub phases: Vec<PhaseRecord>,
    pub code_version: String,
    pub wall_clock_secs: f64,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: FinalMetrics,
    pub final_model_hash: String,
    /// Report name to path, relative to the run directory.
    pub reports: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let file = if path.is_dir() { path.join(RUN_MANIFEST) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(io(&file))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Data(format!("{}: {e}", file.display())))
    }

    pub fn setting(&self) -> &str {
        self.config.setting()
    }
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub model: ModelState<f32>,
    pub closed_book: EvalReport,
    pub open_book: Option<EvalReport>,
    /// Phases restored from checkpoints instead of trained.
    pub resumed_phases: usize,
}

/// Test-split probes recorded in the per-epoch series.
pub fn probe(model: &ModelState<f32>, bundle: &CorpusBundle) -> Result<(f64, f64, f64), ExperimentError> {
    let ppl = doc_perplexity(model, &bundle.test_docs)?;
    let em = evaluate_qa(model, "test_qa", &bundle.test_qa, bundle, EvalMode::ClosedBook, &EvalOptions::default())?
        .exact_match;
    let ret = retention_probe(model, &bundle.retention_qa, bundle)?;
    Ok((ppl, em, ret))
}

fn phase_dir(i: usize, name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect();
    format!("phase-{i:02}-{safe}")
}

#[derive(Serialize, Deserialize)]
struct PhaseMeta {
    config_hash: String,
    corpus_hash: String,
    base_hash: String,
    phase_index: usize,
    record: PhaseRecord,
    epochs: Vec<EpochMetrics>,
}

/// Runs every phase of `config` from `base`. With `out`, each phase ends in
/// a checkpoint under `out`, finished phases found there are resumed, and
/// reports plus `manifest.json` are written at the end. `progress` sees each
/// epoch's metrics as they are produced.
pub fn run(
    config: &RunConfig,
    bundle: &CorpusBundle,
    base: &ModelState<f32>,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutcome, ExperimentError> {
    let started = Instant::now();
    let spec = &config.curriculum;
    spec.validate(bundle)?;
    if bundle.test_qa.is_empty() || bundle.test_docs.is_empty() || bundle.retention_qa.is_empty() {
        return Err(ExperimentError::Data("runs need test documents, test QA and retention QA".into()));
    }
    if base.vocab.hash() != Vocab::build(bundle).hash() {
        return Err(ExperimentError::Data("the base checkpoint's vocabulary was not built from this bundle".into()));
    }
    let config_hash = config.hash();
    let corpus_hash = bundle.hash();
    let base_hash = model_hash(base);
    if let Some(out) = out {
        let m = out.join(RUN_MANIFEST);
        if m.exists() {
            let prior = RunManifest::load(&m)?;
            if prior.config_hash != config_hash {
                return Err(ExperimentError::ResumeMismatch {
                    path: m,
                    expected: config_hash,
                    found: prior.config_hash,
                });
            }
            return Err(ExperimentError::Data(format!(
                "{} already holds a finished run; manifests are immutable",
                out.display()
            )));
        }
        fs::create_dir_all(out).map_err(io(out))?;
    }

    let mut model = base.clone();
    let mut records = Vec::new();
    let mut series = Vec::new();
    let mut resumed = 0;
    if let Some(out) = out {
        for (i, p) in spec.phases.iter().enumerate() {
            let dir = out.join(phase_dir(i, &p.name));
            if !dir.join("manifest.json").exists() {
                break;
            }
            let manifest = checkpoint::load_manifest(&dir)?;
            let meta: PhaseMeta = serde_json::from_value(manifest.meta)
                .map_err(|e| ExperimentError::Data(format!("{}: {e}", dir.display())))?;
            if meta.config_hash != config_hash {
                return Err(ExperimentError::ResumeMismatch {
                    path: dir,
                    expected: config_hash,
                    found: meta.config_hash,
                });
            }
            if meta.corpus_hash != corpus_hash || meta.base_hash != base_hash || meta.phase_index != i {
                return Err(ExperimentError::Data(format!(
                    "{} was trained from a different corpus or base checkpoint",
                    dir.display()
                )));
            }
            model = checkpoint::load(&dir)?.model;
            records.push(meta.record);
            series.extend(meta.epochs);
            resumed = i + 1;
        }
    }

    for (i, phase) in spec.phases.iter().enumerate().skip(resumed) {
        let mut epochs = Vec::new();
        let mut failure = None;
        let mut hook = |m: &ModelState<f32>, _: &str, e: usize| {
            let due = match spec.eval {
                EvalPlan::PerEpoch => true,
                EvalPlan::PhaseEnd => e == phase.epochs,
                EvalPlan::Final => false,
            };
            if !due {
                return Ok(None);
            }
            match probe(m, bundle) {
                Ok((ppl, em, ret)) => {
                    Ok(Some(serde_json::json!({"test_ppl": ppl, "test_em": em, "retention_em": ret})))
                }
                Err(err) => {
                    let msg = err.to_string();
                    failure = Some(err);
                    Err(CurriculumError::Data(msg))
                }
            }
        };
        let result = run_phase(&mut model, phase, bundle, phase_seed(spec.seed, i), &mut hook);
        let (log, opt) = match (result, failure) {
            (_, Some(err)) => return Err(err),
            (r, None) => r?,
        };
        for e in &log.epochs {
            let get = |k: &str| e.eval.as_ref().and_then(|v| v[k].as_f64());
            let m = EpochMetrics {
                phase: e.phase.clone(),
                epoch: e.epoch,
                steps: e.steps,
                loss: e.mean_loss,
                test_ppl: get("test_ppl"),
                test_em: get("test_em"),
                retention_em: get("retention_em"),
            };
            progress(&m);
            epochs.push(m);
        }
        let mut record = PhaseRecord {
            name: phase.name.clone(),
            epochs: phase.epochs,
            lr: phase.lr,
            batch_size: phase.batch_size,
            examples: log.examples,
            steps: log.steps,
            checkpoint: None,
        };
        if let Some(out) = out {
            let rel = phase_dir(i, &phase.name);
            record.checkpoint = Some(rel.clone());
            let meta = PhaseMeta {
                config_hash: config_hash.clone(),
                corpus_hash: corpus_hash.clone(),
                base_hash: base_hash.clone(),
                phase_index: i,
                record: record.clone(),
                epochs: epochs.clone(),
            };
            checkpoint::save(
                &out.join(rel),
                &model,
                Some(&opt),
                serde_json::to_value(&meta).expect("meta serializes"),
            )?;
        }
        records.push(record);
        series.extend(epochs);
    }

    let closed =
        evaluate_qa(&model, "test_qa", &bundle.test_qa, bundle, EvalMode::ClosedBook, &EvalOptions::default())?;
    let open = if config.open_book {
        Some(evaluate_qa(&model, "test_qa", &bundle.test_qa, bundle, EvalMode::OpenBook, &EvalOptions::default())?)
    } else {
        None
    };
    let retention = retention_probe(&model, &bundle.retention_qa, bundle)?;
    let test_ppl = doc_perplexity(&model, &bundle.test_docs)?;
    let mut closed_report = closed;
    closed_report.doc_perplexity = Some(test_ppl);
    closed_report.retention_em = Some(retention);

    let mut reports = BTreeMap::new();
    if let Some(out) = out {
        let mut write = |name: &str, r: &EvalReport| -> Result<(), ExperimentError> {
            let json = format!("{name}.json");
            r.write(&out.join(&json), &out.join(format!("{name}.csv")))?;
            reports.insert(name.to_string(), json);
            Ok(())
        };
        write("closed_book", &closed_report)?;
        if let Some(o) = &open {
            write("open_book", o)?;
        }
    }

    let mut seeds = vec![spec.seed];
    seeds.extend((0..spec.phases.len()).map(|i| phase_seed(spec.seed, i)));
    let manifest = RunManifest {
        config_hash,
        config: config.clone(),
        seeds,
        corpus_hash,
        base_hash,
        preset: config.preset.clone(),
        phases: records,
        code_version: CODE_VERSION.to_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        epochs: series,
        final_metrics: FinalMetrics {
            exact_match: closed_report.exact_match,
            recall: closed_report.recall,
            rouge_l: closed_report.rouge_l,
            open_book_em: open.as_ref().map(|o| o.exact_match),
            retention_em: retention,
            test_ppl,
        },
        final_model_hash: model_hash(&model),
        reports,
    };
    if let Some(out) = out {
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_new(&out.join(RUN_MANIFEST), text.as_bytes())?;
    }
    Ok(RunOutcome { manifest, model, closed_book: closed_report, open_book: open, resumed_phases: resumed })
}

// ----------------------------------------------------------------- sweep ---

/// One cell per (epochs, lr, seed). The grid overrides the document phase's
/// epoch count and base learning rate; `lr_scale` still applies.
pub fn sweep_configs(
    preset_name: &str,
    options: &PresetOptions,
    epochs: &[usize],
    lrs: &[f64],
    seeds: &[u64],
) -> Result<Vec<(String, RunConfig)>, ExperimentError> {
    if epochs.is_empty() || lrs.is_empty() || seeds.is_empty() {
        return Err(ExperimentError::Usage("sweep needs at least one epoch count, learning rate and seed".into()));
    }
    let mut cells = Vec::new();
    for &e in epochs {
        for &lr in lrs {
            for &s in seeds {
                let o = PresetOptions { doc_epochs: e, doc_lr: lr, seed: s, ..options.clone() };
                let mut cfg = RunConfig::from_preset(preset_name, &o)?;
                let setting = format!("{preset_name}-e{e}-lr{lr:e}");
                cfg.curriculum.name = setting.clone();
                cells.push((format!("{setting}-s{s}"), cfg));
            }
        }
    }
    Ok(cells)
}

// ---------------------------------------------------------------- report ---

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub spread: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let spread = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, spread }
    }

    fn percent(&self) -> String {
        match self.spread {
            Some(s) => format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.1}", 100.0 * self.mean),
        }
    }

    fn plain(&self) -> String {
        match self.spread {
            Some(s) => format!("{:.3} ± {:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub preset: Option<String>,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub exact_match: Stat,
    pub recall: Stat,
    pub rouge_l: Stat,
    pub open_book_em: Option<Stat>,
    pub retention_em: Stat,
    pub test_ppl: Stat,
}

fn order_key(m: &RunManifest) -> (usize, String) {
    let idx = m.preset.as_deref().and_then(|p| PRESETS.iter().position(|q| *q == p)).unwrap_or(PRESETS.len());
    (idx, m.setting().to_string())
}

/// Groups runs by setting, in preset order, with mean and spread over seeds.
pub fn build_report(manifests: &[RunManifest]) -> Result<Vec<ReportRow>, ExperimentError> {
    let first = manifests.first().ok_or_else(|| ExperimentError::Usage("report needs at least one run".into()))?;
    if let Some(m) = manifests.iter().find(|m| m.corpus_hash != first.corpus_hash) {
        return Err(ExperimentError::Data(format!(
            "runs use different corpora ({} vs {}); results are not comparable",
            first.corpus_hash, m.corpus_hash
        )));
    }
    let mut groups: BTreeMap<(usize, String), Vec<&RunManifest>> = BTreeMap::new();
    for m in manifests {
        groups.entry(order_key(m)).or_default().push(m);
    }
    Ok(groups
        .into_iter()
        .map(|((_, setting), runs)| {
            let col = |f: &dyn Fn(&FinalMetrics) -> f64| {
                Stat::of(&runs.iter().map(|r| f(&r.final_metrics)).collect::<Vec<_>>())
            };
            let open: Option<Vec<f64>> = runs.iter().map(|r| r.final_metrics.open_book_em).collect();
            ReportRow {
                setting,
                preset: runs[0].preset.clone(),
                runs: runs.len(),
                seeds: runs.iter().map(|r| r.config.curriculum.seed).collect(),
                exact_match: col(&|f| f.exact_match),
                recall: col(&|f| f.recall),
                rouge_l: col(&|f| f.rouge_l),
                open_book_em: open.map(|v| Stat::of(&v)),
                retention_em: col(&|f| f.retention_em),
                test_ppl: col(&|f| f.test_ppl),
            }
        })
        .collect())
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from("| Setting | Runs | EM | Rec. | R-L | Open-book EM | Retention EM | Test PPL |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.setting,
            r.runs,
            r.exact_match.percent(),
            r.recall.percent(),
            r.rouge_l.percent(),
            r.open_book_em.map(|o| o.percent()).unwrap_or_else(|| "-".into()),
            r.retention_em.percent(),
            r.test_ppl.plain()
        ));
    }
    s
}

pub fn render_csv(rows: &[ReportRow]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ExperimentError::Data(format!("csv: {e}"));
    w.write_record([
        "setting",
        "runs",
        "em",
        "em_spread",
        "recall",
        "recall_spread",
        "rouge_l",
        "rouge_l_spread",
        "open_book_em",
        "retention_em",
        "test_ppl",
    ])
    .map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.setting.clone(),
            r.runs.to_string(),
            r.exact_match.mean.to_string(),
            opt(r.exact_match.spread),
            r.recall.mean.to_string(),
            opt(r.recall.spread),
            r.rouge_l.mean.to_string(),
            opt(r.rouge_l.spread),
            opt(r.open_book_em.map(|o| o.mean)),
            r.retention_em.mean.to_string(),
            r.test_ppl.mean.to_string(),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| ExperimentError::Data(e.to_string()))?)
        .map_err(|e| ExperimentError::Data(e.to_string()))
}

/// Per-epoch series of one run.
pub fn render_curve(m: &RunManifest) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ExperimentError::Data(format!("csv: {e}"));
    w.write_record(["phase", "epoch", "steps", "loss", "test_ppl", "test_em", "retention_em"]).map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for e in &m.epochs {
        w.write_record([
            e.phase.clone(),
            e.epoch.to_string(),
            e.steps.to_string(),
            e.loss.to_string(),
            opt(e.test_ppl),
            opt(e.test_em),
            opt(e.retention_em),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| ExperimentError::Data(e.to_string()))?)
        .map_err(|e| ExperimentError::Data(e.to_string()))
}

/// Writes `table.md`, `table.csv` and `curves/<setting>-s<seed>.csv` into
/// `out`, which must not already hold a table.
pub fn write_report(manifests: &[RunManifest], out: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    let rows = build_report(manifests)?;
    let curves = out.join("curves");
    fs::create_dir_all(&curves).map_err(io(&curves))?;
    write_new(&out.join("table.md"), render_markdown(&rows).as_bytes())?;
    write_new(&out.join("table.csv"), render_csv(&rows)?.as_bytes())?;
    let mut used = BTreeMap::new();
    for m in manifests {
        let base = format!("{}-s{}", m.setting(), m.config.curriculum.seed);
        let n = used.entry(base.clone()).or_insert(0usize);
        let name = if *n == 0 { format!("{base}.csv") } else { format!("{base}-{n}.csv") };
        *n += 1;
        write_new(&curves.join(name), render_curve(m)?.as_bytes())?;
    }
    Ok(rows)
}
