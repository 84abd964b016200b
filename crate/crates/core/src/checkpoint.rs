//! On-disk checkpoints: a directory with `manifest.json`, `vocab.json`,
//! `params.bin` and, when present, `optim.bin`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, ModelState};
use crate::optim::AdamW;
use crate::tensor::{read_tensor, write_tensor, Precision, Tensor};
use crate::tokenizer::{Vocab, VocabError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub vocab_hash: String,
    /// Optimizer updates applied by the phase that produced the checkpoint.
    pub step: u64,
    pub precision: Precision,
    pub has_optimizer: bool,
    /// Free-form provenance (phase name, run config hash, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("vocabulary hash {found} does not match the manifest ({expected})")]
    VocabHash { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: ModelState<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn format(path: &Path, detail: impl ToString) -> CheckpointError {
    CheckpointError::Format { path: path.to_path_buf(), detail: detail.to_string() }
}

fn write_tensors(path: &Path, named: &[(String, &Tensor<f32>)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    for (name, t) in named {
        write_tensor(&mut w, name, *t).map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io(path))?);
    let mut out = Vec::new();
    loop {
        match read_tensor::<f32, _>(&mut r) {
            Ok(Some((h, t))) => out.push((h.name, t)),
            Ok(None) => return Ok(out),
            Err(e) => return Err(format(path, e)),
        }
    }
}

/// Writes a checkpoint into `dir`, creating it. Refuses to overwrite an
/// existing manifest.
pub fn save(
    dir: &Path,
    model: &ModelState<f32>,
    optimizer: Option<&AdamW<f32>>,
    meta: serde_json::Value,
) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        return Err(format(&manifest_path, "checkpoint already exists"));
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        vocab_hash: model.vocab.hash(),
        step: optimizer.map_or(0, |o| o.t),
        precision: Precision::Single,
        has_optimizer: optimizer.is_some(),
        meta,
    };
    let vocab_path = dir.join("vocab.json");
    fs::write(&vocab_path, model.vocab.to_json()).map_err(io(&vocab_path))?;
    let named: Vec<(String, &Tensor<f32>)> = model.names().iter().cloned().zip(model.params()).collect();
    write_tensors(&dir.join("params.bin"), &named)?;
    if let Some(opt) = optimizer {
        let mut named = Vec::new();
        for (name, (m, v)) in model.names().iter().zip(opt.m.iter().zip(&opt.v)) {
            named.push((format!("m.{name}"), m));
            named.push((format!("v.{name}"), v));
        }
        write_tensors(&dir.join("optim.bin"), &named)?;
    }
    // The manifest goes last so a partially written directory is never
    // mistaken for a checkpoint.
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io(&manifest_path))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text).map_err(|e| format(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let manifest = load_manifest(dir)?;
    let vocab_path = dir.join("vocab.json");
    let vocab = Vocab::from_json(&fs::read_to_string(&vocab_path).map_err(io(&vocab_path))?)?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(CheckpointError::VocabHash { expected: manifest.vocab_hash.clone(), found: vocab.hash() });
    }
    let params = read_tensors(&dir.join("params.bin"))?;
    let model = ModelState::from_params(manifest.config.clone(), vocab, params)?;
    let optimizer = if manifest.has_optimizer {
        let path = dir.join("optim.bin");
        let tensors = read_tensors(&path)?;
        if tensors.len() != 2 * model.names().len() {
            return Err(format(&path, format!("{} tensors for {} parameters", tensors.len(), model.names().len())));
        }
        let mut opt = AdamW::new(model.params());
        for (i, name) in model.names().iter().enumerate() {
            let (mn, m) = &tensors[2 * i];
            let (vn, v) = &tensors[2 * i + 1];
            if *mn != format!("m.{name}")
                || *vn != format!("v.{name}")
                || m.shape() != model.params()[i].shape()
                || v.shape() != m.shape()
            {
                return Err(format(&path, format!("moment tensors for {name} are missing or misshapen")));
            }
            opt.m[i] = m.clone();
            opt.v[i] = v.clone();
        }
        opt.t = manifest.step;
        Some(opt)
    } else {
        None
    };
    Ok(Checkpoint { manifest, model, optimizer })
}
