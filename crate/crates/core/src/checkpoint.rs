//! Model checkpoints: config, vocabulary and every parameter in one JSON file.
//! Floats are written in round-trip form, so loading is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::vocab::Vocabulary;

pub const FORMAT: &str = "mipic-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    step: usize,
    config: ModelConfig,
    vocabulary: Vec<String>,
    params: ParamStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<AdamW>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub model: Model,
    pub vocab: Vocabulary,
    pub step: usize,
    pub optimizer: Option<AdamW>,
}

/// Writes `model` (and optionally the optimizer moments) to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    step: usize,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    if model.params.iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(Error::Checkpoint("refusing to save non-finite parameters".into()));
    }
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        step,
        config: model.config.clone(),
        vocabulary: vocab.entries().to_vec(),
        params: model.params.clone(),
        optimizer: optimizer.cloned(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads `path` and requires its model config to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Loaded> {
    let loaded = load_checkpoint(path)?;
    let diff = expected.diff(&loaded.model.config);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!(
            "config mismatch (expected != stored): {}",
            diff.join("; ")
        )));
    }
    Ok(loaded)
}

fn parse_checkpoint(text: &str) -> Result<Loaded> {
    let header: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt file: {e}")))?;
    if header.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = header.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(VERSION)) {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version:?}, expected {VERSION}"
        )));
    }
    let file: File =
        serde_json::from_value(header).map_err(|e| Error::Checkpoint(format!("corrupt file: {e}")))?;
    let vocab = Vocabulary::from_tokens(file.vocabulary)?;
    let mut model = Model::new(file.config)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries, config says {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    model.params.copy_values_from(&file.params)?;
    if let Some(opt) = &file.optimizer {
        if !opt.matches(&model.params) {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
    }
    Ok(Loaded {
        model,
        vocab,
        step: file.step,
        optimizer: file.optimizer,
    })
}
