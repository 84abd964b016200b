use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pitlab::baseprep::{pretrain_base, BaseError};
use pitlab::checkpoint;
use pitlab::corpus::{generate_corpus, import_bundle, CorpusBundle, CorpusCounts, Schema, BUNDLE_MANIFEST};
use pitlab::curriculum::{preset_names, PresetOptions};
use pitlab::experiment::{
    output_path, run, sweep_configs, write_new, write_report, BaseConfig, EpochMetrics, ExperimentError, RunConfig,
    RunManifest,
};
use pitlab::model::ModelState;
use pitlab::tokenizer::Vocab;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "pitlab", version, about = "Desk-scale QA-before-document training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus bundle.
    GenerateCorpus {
        /// Schema JSON (built-in schema when omitted).
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Split sizes as JSON (defaults when omitted).
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        qa_per_entity: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base checkpoint on the old-world splits.
    PretrainBase {
        #[arg(long)]
        bundle: PathBuf,
        /// Model shape and recipe JSON (desk defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one curriculum from a base checkpoint.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Run config JSON.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Preset options JSON.
        #[arg(long, requires = "preset")]
        options: Option<PathBuf>,
        /// Overrides the curriculum seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid over document-phase epochs and learning rates.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        preset: String,
        #[arg(long)]
        options: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        epochs_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        lr_list: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison table and curve files from finished runs.
    Report {
        /// Run directories or manifest files.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset's run config, or list presets.
    Preset {
        name: Option<String>,
        #[arg(long)]
        options: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))
}

fn load_bundle(path: &Path) -> Result<CorpusBundle, ExperimentError> {
    let manifest = if path.is_dir() { path.join(BUNDLE_MANIFEST) } else { path.to_path_buf() };
    if !manifest.exists() {
        return Err(ExperimentError::Data(format!("bundle {} not found", manifest.display())));
    }
    Ok(import_bundle(&manifest)?)
}

fn load_base(path: &Path) -> Result<ModelState<f32>, ExperimentError> {
    Ok(checkpoint::load(path)?.model)
}

fn options(path: Option<&PathBuf>) -> Result<PresetOptions, ExperimentError> {
    path.map(|p| read_json(p)).transpose().map(Option::unwrap_or_default)
}

fn show(m: &EpochMetrics) {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    eprintln!(
        "{} epoch {} loss {:.4} test_ppl {} test_em {} retention_em {}",
        m.phase,
        m.epoch,
        m.loss,
        f(m.test_ppl),
        f(m.test_em),
        f(m.retention_em)
    );
}

fn summary(m: &RunManifest) {
    let f = &m.final_metrics;
    println!(
        "{}: EM {:.3} Rec. {:.3} R-L {:.3} open-book {} retention {:.3} test PPL {:.4}",
        m.setting(),
        f.exact_match,
        f.recall,
        f.rouge_l,
        f.open_book_em.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
        f.retention_em,
        f.test_ppl
    );
}

fn execute(cmd: Cmd) -> Result<(), ExperimentError> {
    match cmd {
        Cmd::GenerateCorpus { schema, counts, qa_per_entity, seed, out } => {
            let schema = match schema {
                Some(p) => {
                    let text =
                        fs::read_to_string(&p).map_err(|source| ExperimentError::Io { path: p.clone(), source })?;
                    Schema::from_json(&text)?
                }
                None => Schema::builtin(),
            };
            let mut counts: CorpusCounts = match counts {
                Some(p) => read_json(&p)?,
                None => CorpusCounts::default(),
            };
            if let Some(q) = qa_per_entity {
                counts.qa_per_entity = q;
            }
            let out = output_path(&out);
            if out.join(BUNDLE_MANIFEST).exists() {
                return Err(ExperimentError::Data(format!("{} already holds a bundle", out.display())));
            }
            let g = generate_corpus(&schema, &counts, seed)?;
            g.bundle.export(&out)?;
            let manifest = serde_json::json!({
                "seed": seed,
                "counts": counts,
                "corpus_hash": g.bundle.hash(),
                "code_version": pitlab::experiment::CODE_VERSION,
            });
            write_new(&out.join("corpus_manifest.json"), serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
            println!("{} {}", out.join(BUNDLE_MANIFEST).display(), g.bundle.hash());
        }
        Cmd::PretrainBase { bundle, config, seed, out } => {
            let bundle = load_bundle(&bundle)?;
            let cfg: BaseConfig = match config {
                Some(p) => read_json(&p)?,
                None => BaseConfig::default(),
            };
            let out = output_path(&out);
            let vocab = Vocab::build(&bundle);
            let model_cfg = cfg.model(vocab.len(), seed);
            let mut hook = |_: &ModelState<f32>, phase: &str, e: usize| {
                eprintln!("{phase} epoch {e}");
                Ok(None)
            };
            match pretrain_base(&bundle, vocab, model_cfg, &cfg.recipe, seed, &mut hook) {
                Ok((model, report)) => {
                    let meta = serde_json::json!({
                        "corpus_hash": bundle.hash(),
                        "seed": seed,
                        "base_config": cfg,
                        "retention_em": report.retention_em,
                        "oldworld_ppl": report.oldworld_ppl,
                        "format_rate": report.format_rate,
                        "test_closed_book_em": report.test_closed_book_em,
                    });
                    checkpoint::save(&out, &model, None, meta)?;
                    write_new(
                        &out.join("base_report.json"),
                        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
                    )?;
                    println!(
                        "{}: retention EM {:.3} old-world PPL {:.4} format {:.3}",
                        out.display(),
                        report.retention_em,
                        report.oldworld_ppl,
                        report.format_rate
                    );
                }
                Err(e @ BaseError::Threshold { .. }) => return Err(ExperimentError::Data(e.to_string())),
                Err(e) => return Err(e.into()),
            }
        }
        Cmd::Train { bundle, base, config, preset, options: opts, seed, out } => {
            let bundle = load_bundle(&bundle)?;
            let mut cfg = match (config, preset) {
                (Some(p), _) => RunConfig::from_json(
                    &fs::read_to_string(&p).map_err(|source| ExperimentError::Io { path: p.clone(), source })?,
                )?,
                (None, Some(name)) => RunConfig::from_preset(&name, &options(opts.as_ref())?)?,
                (None, None) => return Err(ExperimentError::Usage("give --config or --preset".into())),
            };
            if let Some(s) = seed {
                cfg.curriculum.seed = s;
            }
            let base = load_base(&base)?;
            let out = output_path(&out);
            let outcome = run(&cfg, &bundle, &base, Some(&out), &mut show)?;
            summary(&outcome.manifest);
        }
        Cmd::Sweep { bundle, base, preset, options: opts, epochs_list, lr_list, seeds, out } => {
            let bundle = load_bundle(&bundle)?;
            let cells = sweep_configs(&preset, &options(opts.as_ref())?, &epochs_list, &lr_list, &seeds)?;
            let base = load_base(&base)?;
            let out = output_path(&out);
            for (name, cfg) in cells {
                let outcome = run(&cfg, &bundle, &base, Some(&out.join(&name)), &mut show)?;
                summary(&outcome.manifest);
            }
        }
        Cmd::Report { runs, out } => {
            let manifests = runs.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>, _>>()?;
            let out = output_path(&out);
            let rows = write_report(&manifests, &out)?;
            print!("{}", pitlab::experiment::render_markdown(&rows));
        }
        Cmd::Preset { name, options: opts } => match name {
            None => {
                for n in preset_names() {
                    println!("{n}");
                }
            }
            Some(n) => println!("{}", RunConfig::from_preset(&n, &options(opts.as_ref())?)?.to_json()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
